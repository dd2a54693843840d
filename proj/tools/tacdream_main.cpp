#include <cstdio>

#include "tacdream/common.hpp"

int main() {
    std::printf("tacdream %s (cli under construction)\n", tacdream::kVersion);
    return 0;
}

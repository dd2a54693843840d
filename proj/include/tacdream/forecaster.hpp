#pragma once

// The forecasting MLP: predicts the future tactile latent from the current
// (adapted) tactile patch embeddings and the draft action chunk, plus the
// zero placeholder used before a forecaster exists and the latent
// forecasting loss.

#include <string>
#include <vector>

#include "tacdream/common.hpp"
#include "tacdream/diffcore.hpp"
#include "tacdream/nn.hpp"

namespace tacdream::forecaster {

using diffcore::Tensor;
using nn::FwdCtx;
using nn::ParamStore;

enum class Provenance { null, predicted, oracle };

template <typename T>
struct DreamEmbedding {
    Tensor<T> patches;  // [P x D], exactly zero for the null dream
    Tensor<T> pooled;   // [1 x D]
    Provenance provenance = Provenance::null;
};

template <typename T>
DreamEmbedding<T> null_dream(size_t patches, size_t dim) {
    DreamEmbedding<T> d;
    d.patches = Tensor<T>::zeros({patches, dim});
    d.pooled = Tensor<T>::zeros({1, dim});
    d.provenance = Provenance::null;
    return d;
}

template <typename T>
DreamEmbedding<T> oracle_dream(const Tensor<T>& future_patches) {
    DreamEmbedding<T> d;
    d.patches = future_patches;
    d.pooled = diffcore::mean_rows(future_patches);
    d.provenance = Provenance::oracle;
    return d;
}

template <typename T>
class Forecaster {
public:
    Forecaster() = default;
    Forecaster(ParamStore<T>& ps, size_t patches, size_t dim, size_t chunk_len, Rng rng,
               size_t hidden = 256, size_t vision_patches = 64)
        : patches_(patches), dim_(dim), chunk_len_(chunk_len), vision_patches_(vision_patches) {
        const size_t in = patches * dim + chunk_len * 7;
        fc1_ = nn::Linear<T>(ps, "forecaster.fc1", in, hidden, rng);
        fc2_ = nn::Linear<T>(ps, "forecaster.fc2", hidden, hidden, rng);
        fc3_ = nn::Linear<T>(ps, "forecaster.fc3", hidden, patches * dim, rng);
        // parallel head for the wrist-image embedding at t+N; only trained
        // when the vision-prediction ablation is on
        fc3v_ = nn::Linear<T>(ps, "forecaster.fc3v", hidden, vision_patches * dim, rng);
    }

    // z_patches: [P x D] adapted tactile embedding; chunk: [H x 7] draft
    DreamEmbedding<T> dream(const Tensor<T>& z_patches, const Tensor<T>& chunk) const {
        auto h = trunk(z_patches, chunk);
        auto out = diffcore::reshape(fc3_.forward(h), {patches_, dim_});
        DreamEmbedding<T> d;
        d.patches = out;
        d.pooled = diffcore::mean_rows(out);
        d.provenance = Provenance::predicted;
        return d;
    }

    // predicted wrist-view patch embedding at t+N, [vision_patches x D]
    Tensor<T> dream_vision(const Tensor<T>& z_patches, const Tensor<T>& chunk) const {
        auto h = trunk(z_patches, chunk);
        return diffcore::reshape(fc3v_.forward(h), {vision_patches_, dim_});
    }

    size_t patches() const { return patches_; }
    size_t dim() const { return dim_; }

private:
    Tensor<T> trunk(const Tensor<T>& z_patches, const Tensor<T>& chunk) const {
        TD_CHECK(z_patches.shape() == diffcore::Shape({patches_, dim_}),
                 "dream: unexpected latent shape");
        TD_CHECK(chunk.numel() == chunk_len_ * 7,
                 "dream: chunk length does not match the configured horizon");
        auto flat = diffcore::concat_cols<T>({diffcore::reshape(z_patches, {1, patches_ * dim_}),
                                              diffcore::reshape(chunk, {1, chunk_len_ * 7})});
        auto h = gelu(fc1_.forward(flat));
        return gelu(fc2_.forward(h));
    }

    size_t patches_ = 0, dim_ = 0, chunk_len_ = 0, vision_patches_ = 64;
    nn::Linear<T> fc1_, fc2_, fc3_, fc3v_;
};

// mean squared error between per-patch L2-normalized embeddings; the target
// side is detached, so no gradient can flow back into the world model
template <typename T>
Tensor<T> forecasting_loss(const Tensor<T>& pred_patches, const Tensor<T>& target_patches) {
    TD_CHECK(pred_patches.shape() == target_patches.shape(), "forecasting_loss: shape mismatch");
    auto p = diffcore::l2_normalize_rows(pred_patches);
    auto t = diffcore::l2_normalize_rows(target_patches.detach());
    auto d = diffcore::sub(p, t);
    return diffcore::mean_all(diffcore::mul(d, d));
}

} // namespace tacdream::forecaster

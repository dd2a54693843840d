#pragma once

// Hierarchical spatial alignment: InfoNCE between the pooled tactile
// embedding and the pooled in-bbox region of each camera view, with in-batch
// negatives plus a pooled non-bbox region of the same image.

#include <optional>
#include <vector>

#include "tacdream/common.hpp"
#include "tacdream/diffcore.hpp"
#include "tacdream/encoders.hpp"
#include "tacdream/geometry.hpp"

namespace tacdream::hsa {

using diffcore::Tensor;

struct HsaConfig {
    double temperature = 0.07;
    double weight = 0.1;  // lambda applied by the trainer
    bool same_image_negatives = true;
};

template <typename T>
struct HsaSample {
    Tensor<T> h_tau;                    // [1 x D], unit norm
    std::optional<Tensor<T>> h_w;       // pooled wrist bbox region
    std::optional<Tensor<T>> h_tp;      // pooled tpv bbox region
    std::optional<Tensor<T>> neg_w;     // pooled non-bbox wrist region
    std::optional<Tensor<T>> neg_tp;    // pooled non-bbox tpv region
};

struct HsaBreakdown {
    double loss_w = 0, loss_tp = 0;
    size_t skipped_w = 0, skipped_tp = 0;
    size_t counted_w = 0, counted_tp = 0;
};

// -log( exp(a.p/k) / (exp(a.p/k) + sum_i exp(a.n_i/k)) )
template <typename T>
Tensor<T> info_nce(const Tensor<T>& anchor, const Tensor<T>& positive,
                   const std::vector<Tensor<T>>& negatives, double temperature) {
    TD_CHECK(temperature > 0, "info_nce: temperature must be positive");
    TD_CHECK(!negatives.empty(), "info_nce: needs at least one negative");
    const T inv_k = T(1.0 / temperature);
    std::vector<Tensor<T>> logits;
    logits.reserve(negatives.size() + 1);
    logits.push_back(diffcore::scale(diffcore::dot_all(anchor, positive), inv_k));
    for (const auto& n : negatives)
        logits.push_back(diffcore::scale(diffcore::dot_all(anchor, n), inv_k));
    return diffcore::cross_entropy_logits(diffcore::concat_rows(logits), 0);
}

// mean over samples of both alignment terms; a sample's term is skipped when
// its bbox pooled vector is absent. Negatives for a sample are the other
// samples' pooled bbox regions of the same view plus (optionally) the pooled
// non-bbox region of its own image.
template <typename T>
std::pair<Tensor<T>, HsaBreakdown> hsa_loss(const std::vector<HsaSample<T>>& batch,
                                            const HsaConfig& cfg) {
    TD_CHECK(batch.size() >= 2, "hsa_loss: needs a batch of at least 2 for in-batch negatives");
    HsaBreakdown bd;
    Tensor<T> total_w, total_tp;
    for (size_t i = 0; i < batch.size(); ++i) {
        auto term = [&](const std::optional<Tensor<T>>& pos,
                        auto member_pos, auto member_neg,
                        Tensor<T>& total, size_t& counted, size_t& skipped) {
            if (!pos.has_value()) {
                skipped += 1;
                return;
            }
            std::vector<Tensor<T>> negatives;
            for (size_t j = 0; j < batch.size(); ++j) {
                if (j == i) continue;
                const auto& other = batch[j].*member_pos;
                if (other.has_value()) negatives.push_back(*other);
            }
            if (cfg.same_image_negatives) {
                const auto& own_neg = batch[i].*member_neg;
                if (own_neg.has_value()) negatives.push_back(*own_neg);
            }
            if (negatives.empty()) {
                skipped += 1;
                return;
            }
            auto l = info_nce(batch[i].h_tau, *pos, negatives, cfg.temperature);
            total = total.defined() ? diffcore::add(total, l) : l;
            counted += 1;
        };
        term(batch[i].h_w, &HsaSample<T>::h_w, &HsaSample<T>::neg_w, total_w, bd.counted_w,
             bd.skipped_w);
        term(batch[i].h_tp, &HsaSample<T>::h_tp, &HsaSample<T>::neg_tp, total_tp, bd.counted_tp,
             bd.skipped_tp);
    }
    Tensor<T> loss = Tensor<T>::scalar(T(0));
    if (total_w.defined()) {
        auto lw = diffcore::scale(total_w, T(1) / T(bd.counted_w));
        bd.loss_w = double(lw.item());
        loss = diffcore::add(loss, lw);
    }
    if (total_tp.defined()) {
        auto ltp = diffcore::scale(total_tp, T(1) / T(bd.counted_tp));
        bd.loss_tp = double(ltp.item());
        loss = diffcore::add(loss, ltp);
    }
    return {loss, bd};
}

// non-bbox region of a view: a deterministic pooled sample of tokens whose
// patch centers fall outside the bbox (the complement region)
inline std::vector<bool> complement_mask(const std::vector<bool>& bbox_mask) {
    std::vector<bool> out(bbox_mask.size());
    for (size_t i = 0; i < bbox_mask.size(); ++i) out[i] = !bbox_mask[i];
    return out;
}

} // namespace tacdream::hsa

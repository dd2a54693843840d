#pragma once

// The full policy bundle: one parameter store holding the multimodal
// encoder, the (frozen) tactile world model, the residual adapter, the
// forecaster, and the action expert, plus action/proprio normalization and
// the two-pass think/dream/act inference loop.

#include <array>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "tacdream/common.hpp"
#include "tacdream/diffcore.hpp"
#include "tacdream/encoders.hpp"
#include "tacdream/forecaster.hpp"
#include "tacdream/nn.hpp"
#include "tacdream/policy.hpp"
#include "tacdream/simworld.hpp"
#include "tacdream/worldmodel.hpp"

namespace tacdream::model {

using diffcore::Tensor;
using nlohmann::json;

struct ModelConfig {
    encoders::EncoderConfig enc;
    worldmodel::WmConfig wm;
    policy::PolicyConfig pol;
    bool use_dream = false;        // stage-2 style two-pass inference
    bool disable_tactile = false;  // feed the no-contact gel image instead

    json to_json() const {
        json j;
        j["d_model"] = enc.token_dim;
        j["enc_depth"] = enc.depth;
        j["heads"] = enc.heads;
        j["mid_layer"] = enc.mid_layer;
        j["patch_px"] = enc.patch_px;
        j["num_tasks"] = enc.num_tasks;
        j["dropout"] = enc.dropout;
        j["wm_size"] = wm.size;
        j["wm_context"] = wm.context;
        j["wm_horizon"] = wm.horizon;
        j["pol_depth"] = pol.depth;
        j["horizon"] = pol.horizon;
        j["use_dream"] = use_dream;
        j["disable_tactile"] = disable_tactile;
        return j;
    }

    static ModelConfig from_json(const json& j) {
        ModelConfig c;
        c.enc.token_dim = j.at("d_model").get<size_t>();
        c.enc.depth = j.at("enc_depth").get<size_t>();
        c.enc.heads = j.at("heads").get<size_t>();
        c.enc.mid_layer = j.at("mid_layer").get<size_t>();
        c.enc.patch_px = j.at("patch_px").get<size_t>();
        c.enc.num_tasks = j.at("num_tasks").get<size_t>();
        c.enc.dropout = j.at("dropout").get<double>();
        c.wm.dim = c.enc.token_dim;
        c.wm.heads = c.enc.heads;
        c.wm.size = j.at("wm_size").get<std::string>();
        c.wm.context = j.at("wm_context").get<size_t>();
        c.wm.horizon = j.at("wm_horizon").get<size_t>();
        c.pol.dim = c.enc.token_dim;
        c.pol.heads = c.enc.heads;
        c.pol.depth = j.at("pol_depth").get<size_t>();
        c.pol.horizon = j.at("horizon").get<size_t>();
        c.pol.dropout = c.enc.dropout;
        c.use_dream = j.at("use_dream").get<bool>();
        c.disable_tactile = j.at("disable_tactile").get<bool>();
        return c;
    }
};

// physical-unit action chunk
struct ActionChunk {
    size_t H = 0;
    std::vector<double> data;  // H x 7

    simworld::Action action_at(size_t j) const {
        simworld::Action a;
        for (int d = 0; d < 7; ++d) a[d] = data[j * 7 + d];
        return a;
    }
};

template <typename T>
struct ThinkDreamActResult {
    ActionChunk draft;
    ActionChunk final;
    forecaster::DreamEmbedding<T> dream;
    bool dreamed = false;
};

template <typename T>
class PolicyModel {
public:
    PolicyModel(const ModelConfig& cfg, uint64_t init_seed)
        : cfg_(cfg),
          encoder_(store_, cfg.enc, Rng(init_seed).split(1)),
          wm_(store_, cfg.wm, Rng(init_seed).split(2)),
          adapter_(store_, cfg.wm, Rng(init_seed).split(3), cfg.enc.dropout),
          fc_(store_, cfg.wm.patches(), cfg.wm.dim, cfg.pol.horizon, Rng(init_seed).split(4), 256,
              cfg.enc.img_tokens()),
          expert_(store_, cfg.pol, cfg.wm.patches(), cfg.wm.dim, Rng(init_seed).split(5)) {
        action_mean_ = store_.create_buffer("norm.action.mean", {7});
        action_std_ = store_.create_buffer("norm.action.std", {7});
        proprio_mean_ = store_.create_buffer("norm.proprio.mean", {7});
        proprio_std_ = store_.create_buffer("norm.proprio.std", {7});
        for (int i = 0; i < 7; ++i) {
            action_std_.value()[i] = T(1);
            proprio_std_.value()[i] = T(1);
        }
        flat_tactile_.assign(cfg.enc.tac_size * cfg.enc.tac_size * 3, 0.5f);
    }

    const ModelConfig& config() const { return cfg_; }
    nn::ParamStore<T>& store() { return store_; }
    const nn::ParamStore<T>& store() const { return store_; }
    encoders::MultimodalEncoder<T>& encoder() { return encoder_; }
    const encoders::MultimodalEncoder<T>& encoder() const { return encoder_; }
    worldmodel::TactileWorldModel<T>& wm() { return wm_; }
    const worldmodel::TactileWorldModel<T>& wm() const { return wm_; }
    worldmodel::TactileAdapter<T>& adapter() { return adapter_; }
    const worldmodel::TactileAdapter<T>& adapter() const { return adapter_; }
    forecaster::Forecaster<T>& forecaster_mlp() { return fc_; }
    const forecaster::Forecaster<T>& forecaster_mlp() const { return fc_; }
    policy::ActionExpert<T>& expert() { return expert_; }
    const policy::ActionExpert<T>& expert() const { return expert_; }

    void set_norm_stats(const std::array<double, 7>& a_mean, const std::array<double, 7>& a_std,
                        const std::array<double, 7>& p_mean, const std::array<double, 7>& p_std) {
        for (int i = 0; i < 7; ++i) {
            action_mean_.value()[i] = T(a_mean[i]);
            action_std_.value()[i] = T(std::max(a_std[i], 1e-8));
            proprio_mean_.value()[i] = T(p_mean[i]);
            proprio_std_.value()[i] = T(std::max(p_std[i], 1e-8));
        }
    }

    // ---- normalization -----------------------------------------------------

    std::array<float, 7> normalize_proprio(const std::array<float, 7>& p) const {
        std::array<float, 7> out;
        for (int i = 0; i < 7; ++i)
            out[i] = float((double(p[i]) - double(proprio_mean_.value()[i])) /
                           double(proprio_std_.value()[i]));
        return out;
    }

    std::vector<T> normalize_chunk(const float* chunk) const {
        std::vector<T> out(cfg_.pol.horizon * 7);
        for (size_t j = 0; j < cfg_.pol.horizon; ++j)
            for (int d = 0; d < 7; ++d)
                out[j * 7 + d] = T((double(chunk[j * 7 + d]) - double(action_mean_.value()[d])) /
                                   double(action_std_.value()[d]));
        return out;
    }

    ActionChunk denormalize_chunk(const Tensor<T>& normed) const {
        ActionChunk out;
        out.H = cfg_.pol.horizon;
        out.data.resize(out.H * 7);
        for (size_t j = 0; j < out.H; ++j)
            for (int d = 0; d < 7; ++d)
                out.data[j * 7 + d] = double(normed.value()[j * 7 + d]) *
                                          double(action_std_.value()[d]) +
                                      double(action_mean_.value()[d]);
        return out;
    }

    // builds the encoder input, applying proprio normalization and the
    // tactile-disable substitution
    encoders::EncoderInput make_input(const float* tpv, const float* wrist, const float* tactile,
                                      const std::array<float, 7>& raw_proprio,
                                      int prompt_id) const {
        encoders::EncoderInput in;
        in.tpv = tpv;
        in.wrist = wrist;
        in.tactile = cfg_.disable_tactile ? flat_tactile_.data() : tactile;
        in.proprio = normalize_proprio(raw_proprio);
        in.prompt_id = prompt_id;
        return in;
    }

    encoders::EncoderInput make_input(const simworld::Observation& obs) const {
        return make_input(obs.tpv.data(), obs.wrist.data(), obs.tactile.data(), obs.proprio,
                          obs.prompt_id);
    }

    // ---- inference ----------------------------------------------------------

    // two-pass inference; the encoder runs once and its output is reused.
    // With use_dream off (stage-1 policies) the final chunk is the draft.
    ThinkDreamActResult<T> think_dream_act(const simworld::Observation& obs) const {
        diffcore::NoGrad ng;
        ThinkDreamActResult<T> res;
        const auto in = make_input(obs);
        auto [h_mid, h_align] = encoder_.encode(in, nn::eval_ctx());
        (void)h_mid;
        const auto null_d = forecaster::null_dream<T>(cfg_.wm.patches(), cfg_.wm.dim);
        auto draft_normed = expert_.act(h_align, null_d, nn::eval_ctx());
        res.draft = denormalize_chunk(draft_normed);
        if (!cfg_.use_dream || cfg_.disable_tactile) {
            res.final = res.draft;
            res.dream = null_d;
            return res;
        }
        auto z = wm_.embed(in.tactile);
        auto adapted = adapter_.adapt(z.patches, nn::eval_ctx());
        res.dream = fc_.dream(adapted, draft_normed);
        res.dreamed = true;
        auto final_normed = expert_.act(h_align, res.dream, nn::eval_ctx());
        res.final = denormalize_chunk(final_normed);
        return res;
    }

    // ---- checkpoints ---------------------------------------------------------

    void save(const std::string& dir, const json& extra = json::object()) const {
        std::filesystem::create_directories(dir);
        store_.save(dir + "/params.dtwt");
        json meta;
        meta["model"] = cfg_.to_json();
        meta["version"] = kVersion;
        meta["wm_frozen"] = wm_.frozen();
        for (auto it = extra.begin(); it != extra.end(); ++it) meta[it.key()] = it.value();
        std::ofstream f(dir + "/model.json");
        f << meta.dump(2) << "\n";
        TD_CHECK(f.good(), "cannot write model meta: " + dir);
    }

    static ModelConfig peek_config(const std::string& dir) {
        std::ifstream f(dir + "/model.json");
        TD_CHECK(f.good(), "cannot open model meta in " + dir);
        json meta = json::parse(f);
        return ModelConfig::from_json(meta.at("model"));
    }

    static json peek_meta(const std::string& dir) {
        std::ifstream f(dir + "/model.json");
        TD_CHECK(f.good(), "cannot open model meta in " + dir);
        return json::parse(f);
    }

    void load_params(const std::string& dir) { store_.load(dir + "/params.dtwt"); }

private:
    ModelConfig cfg_;
    nn::ParamStore<T> store_;
    encoders::MultimodalEncoder<T> encoder_;
    worldmodel::TactileWorldModel<T> wm_;
    worldmodel::TactileAdapter<T> adapter_;
    forecaster::Forecaster<T> fc_;
    policy::ActionExpert<T> expert_;
    Tensor<T> action_mean_, action_std_, proprio_mean_, proprio_std_;
    std::vector<float> flat_tactile_;
};

} // namespace tacdream::model

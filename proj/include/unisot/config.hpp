#pragma once

#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "tensor.hpp"

namespace unisot {

struct config_error : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// `key = value` per line, `#` starts a comment.
class Config {
public:
    Config() = default;

    static Config parse(std::istream& in) {
        Config cfg;
        std::string line;
        int lineno = 0;
        while (std::getline(in, line)) {
            ++lineno;
            auto hash = line.find('#');
            if (hash != std::string::npos) line = line.substr(0, hash);
            std::string trimmed = trim(line);
            if (trimmed.empty()) continue;
            auto eq = trimmed.find('=');
            if (eq == std::string::npos)
                throw config_error("config line " + std::to_string(lineno) + ": missing '='");
            std::string key = trim(trimmed.substr(0, eq));
            std::string value = trim(trimmed.substr(eq + 1));
            if (key.empty())
                throw config_error("config line " + std::to_string(lineno) + ": empty key");
            cfg.values_[key] = value;
        }
        return cfg;
    }

    static Config load(const std::string& path) {
        std::ifstream in(path);
        if (!in) throw config_error("cannot open config: " + path);
        return parse(in);
    }

    bool has(const std::string& key) const { return values_.count(key) > 0; }

    std::string get_str(const std::string& key, const std::string& fallback) const {
        auto it = values_.find(key);
        return it == values_.end() ? fallback : it->second;
    }

    double get_real(const std::string& key, double fallback) const {
        auto it = values_.find(key);
        if (it == values_.end()) return fallback;
        try {
            size_t pos = 0;
            double v = std::stod(it->second, &pos);
            if (pos != it->second.size()) throw config_error("");
            return v;
        } catch (...) {
            throw config_error("config key '" + key + "': not a number: " + it->second);
        }
    }

    int get_int(const std::string& key, int fallback) const {
        double v = get_real(key, fallback);
        int i = static_cast<int>(v);
        if (static_cast<double>(i) != v)
            throw config_error("config key '" + key + "': not an integer");
        return i;
    }

    const std::map<std::string, std::string>& entries() const { return values_; }

private:
    static std::string trim(const std::string& s) {
        size_t a = s.find_first_not_of(" \t\r\n");
        if (a == std::string::npos) return "";
        size_t b = s.find_last_not_of(" \t\r\n");
        return s.substr(a, b - a + 1);
    }

    std::map<std::string, std::string> values_;
};

// Architecture hyperparameters. Defaults are the desk-scale configuration;
// every field is overridable from a config file.
struct ModelConfig {
    int embed_dim = 16;       // C
    int heads = 2;            // H
    int shallow_layers = 2;   // N
    int deep_layers = 2;      // M
    int patch = 4;            // p
    int template_size = 16;   // H_z = W_z
    int search_size = 32;     // H_x = W_x
    int max_lang_tokens = 8;  // N_l
    int vocab = 64;           // language vocabulary (id 0 = pad)
    int channels = 3;
    int adapter_rank = 8;     // r
    double tau = 0.07;
    double distractor_beta = 0.75;
    bool beta_inclusive = false;
    int update_interval = 20;     // 0 means never refresh after init
    double confidence_threshold = 0.5;
    int context_capacity = 2;     // template + most recent high-confidence frame

    int n_z() const { return (template_size / patch) * (template_size / patch); }
    int n_x() const { return (search_size / patch) * (search_size / patch); }
    int grid() const { return search_size / patch; }
    int joint_len() const { return 2 + max_lang_tokens + 2 * n_z() + 2 * n_x(); }

    static ModelConfig from(const Config& c) {
        ModelConfig m;
        m.embed_dim = c.get_int("embed_dim", m.embed_dim);
        m.heads = c.get_int("heads", m.heads);
        m.shallow_layers = c.get_int("shallow_layers", m.shallow_layers);
        m.deep_layers = c.get_int("deep_layers", m.deep_layers);
        m.patch = c.get_int("patch", m.patch);
        m.template_size = c.get_int("template_size", m.template_size);
        m.search_size = c.get_int("search_size", m.search_size);
        m.max_lang_tokens = c.get_int("max_lang_tokens", m.max_lang_tokens);
        m.vocab = c.get_int("vocab", m.vocab);
        m.channels = c.get_int("channels", m.channels);
        m.adapter_rank = c.get_int("adapter_rank", m.adapter_rank);
        m.tau = c.get_real("tau", m.tau);
        m.distractor_beta = c.get_real("distractor_beta", m.distractor_beta);
        m.beta_inclusive = c.get_int("beta_inclusive", m.beta_inclusive ? 1 : 0) != 0;
        std::string iv = c.get_str("update_interval", std::to_string(m.update_interval));
        m.update_interval = (iv == "inf") ? 0 : c.get_int("update_interval", m.update_interval);
        m.confidence_threshold = c.get_real("confidence_threshold", m.confidence_threshold);
        m.context_capacity = c.get_int("context_capacity", m.context_capacity);
        validate(m);
        return m;
    }

    static void validate(const ModelConfig& m) {
        if (m.embed_dim % m.heads != 0) throw config_error("embed_dim must divide by heads");
        if (m.template_size % m.patch != 0 || m.search_size % m.patch != 0)
            throw config_error("image sizes must divide by patch");
        if (!(m.tau > 0)) throw config_error("tau must be positive");
        if (m.distractor_beta < 0 || m.distractor_beta > 1)
            throw config_error("distractor_beta must lie in [0,1]");
    }
};

struct TrainConfig {
    int stage = 1;
    double ratio_bbox = 4.0, ratio_nl = 1.0, ratio_nlbbox = 4.0;  // reference sampling ratio
    int max_frame_interval = 200;
    int steps = 1500;
    int batch_size = 8;
    double lr_encoder = 1e-3;
    double lr_head = 2e-3;
    double lr_stage2 = 2e-3;
    double weight_decay = 1e-4;
    double grad_clip = 1.0;
    double lambda_1 = 5.0;
    double lambda_giou = 2.0;
    double lambda_mmc = 0.1;
    double lambda_orth = 0.1;
    int n_neg = 9;
    int n_hat = 4;   // block-average modality-shared rank budget
    int m_hat = 8;   // block-average modality-specific rank budget
    int warmup_steps = 200;
    int alloc_interval = 100;
    uint64_t seed = 1;
    std::string scenes_dir;

    static TrainConfig from(const Config& c) {
        TrainConfig t;
        t.stage = c.get_int("stage", t.stage);
        t.ratio_bbox = c.get_real("ratio_bbox", t.ratio_bbox);
        t.ratio_nl = c.get_real("ratio_nl", t.ratio_nl);
        t.ratio_nlbbox = c.get_real("ratio_nlbbox", t.ratio_nlbbox);
        t.max_frame_interval = c.get_int("max_frame_interval", t.max_frame_interval);
        t.steps = c.get_int("steps", t.steps);
        t.batch_size = c.get_int("batch_size", t.batch_size);
        t.lr_encoder = c.get_real("lr_encoder", t.lr_encoder);
        t.lr_head = c.get_real("lr_head", t.lr_head);
        t.lr_stage2 = c.get_real("lr_stage2", t.lr_stage2);
        t.weight_decay = c.get_real("weight_decay", t.weight_decay);
        t.grad_clip = c.get_real("grad_clip", t.grad_clip);
        t.lambda_1 = c.get_real("lambda_1", t.lambda_1);
        t.lambda_giou = c.get_real("lambda_giou", t.lambda_giou);
        t.lambda_mmc = c.get_real("lambda_mmc", t.lambda_mmc);
        t.lambda_orth = c.get_real("lambda_orth", t.lambda_orth);
        t.n_neg = c.get_int("n_neg", t.n_neg);
        t.n_hat = c.get_int("n_hat", t.n_hat);
        t.m_hat = c.get_int("m_hat", t.m_hat);
        t.warmup_steps = c.get_int("warmup_steps", t.warmup_steps);
        t.alloc_interval = c.get_int("alloc_interval", t.alloc_interval);
        t.seed = static_cast<uint64_t>(c.get_real("seed", static_cast<double>(t.seed)));
        t.scenes_dir = c.get_str("scenes_dir", t.scenes_dir);
        if (t.ratio_bbox < 0 || t.ratio_nl < 0 || t.ratio_nlbbox < 0 ||
            t.ratio_bbox + t.ratio_nl + t.ratio_nlbbox == 0)
            throw config_error("reference ratio must be nonnegative and not all zero");
        return t;
    }
};

}  // namespace unisot

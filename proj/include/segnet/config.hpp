#pragma once

#include <charconv>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "segnet/error.hpp"

namespace segnet {

struct LossWeights {
    double alpha = 0.7;          // generation vs tag
    double beta = 0.5;           // extraction vs generation
    double omega_selector = 0.7; // positive-class weight, selector
    double omega_extractor = 2.0;
};

struct OptimConfig {
    double lr = 1e-4;
    std::size_t batch_size = 80;
    double clip_norm = 1.0;
    std::size_t patience = 5; // validation evaluations without improvement
    std::size_t epochs = 50;
    double target_loss = 0.0; // stop once the training loss falls below (0 = off)
};

// All architecture and training hyper-parameters in one validated record.
// The full profile carries the production-size values; the desk profile
// is the small configuration used by the test and acceptance suites.
struct ModelConfig {
    std::size_t d_model = 512;
    std::size_t layers = 6;        // L, shared by encoder and decoder
    std::size_t heads = 8;         // h
    std::size_t d_k = 0;           // 0 = derive d_model / heads
    std::size_t d_v = 0;           // 0 = derive (same as d_k)
    std::size_t d_ff = 2048;
    std::size_t char_filters = 0;  // 0 = derive (= d_model)
    std::size_t char_dim = 16;
    std::size_t char_width = 3;
    std::size_t pos_tag_layer = 0; // l; 0 = derive (3 when L=6, else ceil(L/2))
    std::size_t rel_clip = 16;     // k, relative-position clip distance
    std::size_t vocab_size = 50000;
    std::size_t src_budget = 200;  // selected-sentence word budget
    std::size_t max_len = 512;     // absolute-position table size
    std::size_t max_sent = 128;    // segment table size
    std::size_t selector_layers = 0; // 0 = derive (= layers)
    std::size_t decode_max_len = 40;
    double dropout = 0.2;
    std::uint64_t seed = 1;
    OptimConfig optim;
    LossWeights loss;

    static ModelConfig full() { return ModelConfig{}; }

    static ModelConfig desk() {
        ModelConfig c;
        c.d_model = 64;
        c.layers = 2;
        c.heads = 2;
        c.d_ff = 128;
        c.vocab_size = 2000;
        c.max_len = 256;
        c.max_sent = 64;
        c.dropout = 0.0; // desk-scale corpora are overfit oracles
        c.optim.lr = 1e-3;
        c.optim.batch_size = 10;
        c.optim.epochs = 400;
        c.optim.target_loss = 0.03;
        return c;
    }

    static ModelConfig profile(const std::string& name) {
        if (name == "full") return full();
        if (name == "desk") return desk();
        throw ConfigError("unknown profile: " + name + " (expected full or desk)");
    }

    // Fill derived fields and check invariants; call after any mutation.
    void finalize() {
        if (heads == 0) throw ConfigError("heads must be positive");
        if (d_k == 0) {
            if (d_model % heads != 0)
                throw ConfigError("d_model (" + std::to_string(d_model) +
                                  ") not divisible by heads (" + std::to_string(heads) + ")");
            d_k = d_model / heads;
        }
        if (d_v == 0) d_v = d_k;
        if (char_filters == 0) char_filters = d_model;
        if (pos_tag_layer == 0) pos_tag_layer = layers == 6 ? 3 : (layers + 1) / 2;
        if (selector_layers == 0) selector_layers = layers;

        auto positive = [](std::size_t v, const char* name) {
            if (v == 0) throw ConfigError(std::string(name) + " must be positive");
        };
        positive(d_model, "d_model");
        positive(layers, "layers");
        positive(d_ff, "d_ff");
        positive(char_dim, "char_dim");
        positive(char_width, "char_width");
        positive(vocab_size, "vocab_size");
        positive(src_budget, "src_budget");
        positive(max_len, "max_len");
        positive(max_sent, "max_sent");
        positive(decode_max_len, "decode_max_len");
        positive(selector_layers, "selector_layers");
        if (heads * d_k != d_model)
            throw ConfigError("d_model must equal heads*d_k: " + std::to_string(d_model) +
                              " != " + std::to_string(heads) + "*" + std::to_string(d_k));
        if (pos_tag_layer > layers)
            throw ConfigError("pos_tag_layer (" + std::to_string(pos_tag_layer) +
                              ") exceeds layers (" + std::to_string(layers) + ")");
        if (char_filters != d_model)
            throw ConfigError("char_filters must equal d_model (embeddings are summed)");
        if (vocab_size < 7) throw ConfigError("vocab_size must cover the reserved specials");
        if (src_budget > max_len)
            throw ConfigError("src_budget (" + std::to_string(src_budget) +
                              ") exceeds max_len (" + std::to_string(max_len) + ")");
        if (dropout < 0.0 || dropout >= 1.0) throw ConfigError("dropout must be in [0, 1)");
        if (loss.alpha < 0.0 || loss.alpha > 1.0) throw ConfigError("alpha must be in [0, 1]");
        if (loss.beta < 0.0 || loss.beta > 1.0) throw ConfigError("beta must be in [0, 1]");
        if (loss.omega_selector <= 0.0 || loss.omega_extractor <= 0.0)
            throw ConfigError("omega weights must be positive");
        if (optim.lr <= 0.0) throw ConfigError("lr must be positive");
        if (optim.batch_size == 0) throw ConfigError("batch_size must be positive");
        if (optim.clip_norm <= 0.0) throw ConfigError("clip_norm must be positive");
        if (optim.patience == 0) throw ConfigError("patience must be positive");
        if (optim.epochs == 0) throw ConfigError("epochs must be positive");
        if (optim.target_loss < 0.0) throw ConfigError("target_loss must be non-negative");
    }

    // ---- flat key=value text form (canonical: fixed order, shortest floats)

    static std::string num(double v) {
        char buf[32];
        auto [p, ec] = std::to_chars(buf, buf + sizeof(buf), v);
        return std::string(buf, p);
    }

    std::string serialize() const {
        std::ostringstream os;
        os << "d_model = " << d_model << "\n";
        os << "layers = " << layers << "\n";
        os << "heads = " << heads << "\n";
        os << "d_k = " << d_k << "\n";
        os << "d_v = " << d_v << "\n";
        os << "d_ff = " << d_ff << "\n";
        os << "char_filters = " << char_filters << "\n";
        os << "char_dim = " << char_dim << "\n";
        os << "char_width = " << char_width << "\n";
        os << "pos_tag_layer = " << pos_tag_layer << "\n";
        os << "rel_clip = " << rel_clip << "\n";
        os << "vocab_size = " << vocab_size << "\n";
        os << "src_budget = " << src_budget << "\n";
        os << "max_len = " << max_len << "\n";
        os << "max_sent = " << max_sent << "\n";
        os << "selector_layers = " << selector_layers << "\n";
        os << "decode_max_len = " << decode_max_len << "\n";
        os << "dropout = " << num(dropout) << "\n";
        os << "seed = " << seed << "\n";
        os << "lr = " << num(optim.lr) << "\n";
        os << "batch_size = " << optim.batch_size << "\n";
        os << "clip_norm = " << num(optim.clip_norm) << "\n";
        os << "patience = " << optim.patience << "\n";
        os << "epochs = " << optim.epochs << "\n";
        os << "target_loss = " << num(optim.target_loss) << "\n";
        os << "alpha = " << num(loss.alpha) << "\n";
        os << "beta = " << num(loss.beta) << "\n";
        os << "omega_selector = " << num(loss.omega_selector) << "\n";
        os << "omega_extractor = " << num(loss.omega_extractor) << "\n";
        return os.str();
    }

    void set(const std::string& key, const std::string& value) {
        auto as_size = [&]() -> std::size_t {
            std::size_t v{};
            auto [p, ec] = std::from_chars(value.data(), value.data() + value.size(), v);
            if (ec != std::errc() || p != value.data() + value.size())
                throw ConfigError("bad integer for " + key + ": " + value);
            return v;
        };
        auto as_double = [&]() -> double {
            try {
                std::size_t used = 0;
                double v = std::stod(value, &used);
                if (used != value.size()) throw std::invalid_argument("trailing");
                return v;
            } catch (const std::exception&) {
                throw ConfigError("bad number for " + key + ": " + value);
            }
        };
        if (key == "d_model") d_model = as_size();
        else if (key == "layers") layers = as_size();
        else if (key == "heads") heads = as_size();
        else if (key == "d_k") d_k = as_size();
        else if (key == "d_v") d_v = as_size();
        else if (key == "d_ff") d_ff = as_size();
        else if (key == "char_filters") char_filters = as_size();
        else if (key == "char_dim") char_dim = as_size();
        else if (key == "char_width") char_width = as_size();
        else if (key == "pos_tag_layer") pos_tag_layer = as_size();
        else if (key == "rel_clip") rel_clip = as_size();
        else if (key == "vocab_size") vocab_size = as_size();
        else if (key == "src_budget") src_budget = as_size();
        else if (key == "max_len") max_len = as_size();
        else if (key == "max_sent") max_sent = as_size();
        else if (key == "selector_layers") selector_layers = as_size();
        else if (key == "decode_max_len") decode_max_len = as_size();
        else if (key == "dropout") dropout = as_double();
        else if (key == "seed") seed = static_cast<std::uint64_t>(as_size());
        else if (key == "lr") optim.lr = as_double();
        else if (key == "batch_size") optim.batch_size = as_size();
        else if (key == "clip_norm") optim.clip_norm = as_double();
        else if (key == "patience") optim.patience = as_size();
        else if (key == "epochs") optim.epochs = as_size();
        else if (key == "target_loss") optim.target_loss = as_double();
        else if (key == "alpha") loss.alpha = as_double();
        else if (key == "beta") loss.beta = as_double();
        else if (key == "omega_selector") loss.omega_selector = as_double();
        else if (key == "omega_extractor") loss.omega_extractor = as_double();
        else throw ConfigError("unknown config key: " + key);
    }

    void apply_text(const std::string& text) {
        std::istringstream is(text);
        std::string line;
        std::size_t lineno = 0;
        while (std::getline(is, line)) {
            ++lineno;
            const auto hash = line.find('#');
            if (hash != std::string::npos) line.erase(hash);
            auto trim = [](std::string s) {
                const auto b = s.find_first_not_of(" \t\r");
                const auto e = s.find_last_not_of(" \t\r");
                return b == std::string::npos ? std::string() : s.substr(b, e - b + 1);
            };
            const std::string t = trim(line);
            if (t.empty()) continue;
            const auto eq = t.find('=');
            if (eq == std::string::npos)
                throw ConfigError("config line " + std::to_string(lineno) + " lacks '='");
            set(trim(t.substr(0, eq)), trim(t.substr(eq + 1)));
        }
    }

    static ModelConfig parse(const std::string& text, const ModelConfig& base = full()) {
        ModelConfig c = base;
        c.apply_text(text);
        c.finalize();
        return c;
    }
};

// defaults <- profile <- file <- command-line overrides, then validation
inline ModelConfig load_config(const std::string& path,
                               const std::vector<std::pair<std::string, std::string>>& overrides,
                               const std::string& profile = "full") {
    ModelConfig c = ModelConfig::profile(profile);
    if (!path.empty()) {
        std::ifstream is(path);
        if (!is) throw ConfigError("cannot read config file: " + path);
        std::stringstream buf;
        buf << is.rdbuf();
        c.apply_text(buf.str());
    }
    for (const auto& [k, v] : overrides) c.set(k, v);
    c.finalize();
    return c;
}

} // namespace segnet

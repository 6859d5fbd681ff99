#pragma once

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <sstream>
#include <string>

#include "pfmda/errors.hpp"
#include "pfmda/losses.hpp"
#include "pfmda/networks.hpp"

namespace pfmda {

/// Everything a training or ablation run needs. Serialized as flat key=value text.
struct TrainConfig {
    std::uint64_t seed = 7;
    ModelConfig model{.image_size = 32, .patch_size = 8, .in_channels = 3, .embed_dim = 32, .heads = 4,
                      .ffn_mult = 4, .head_channels = 8, .conv_width = 16};
    std::size_t epochs = 30;
    std::size_t constant_epochs = 0;  // 0: first two thirds of `epochs`
    std::size_t batch_size = 4;
    double lr_agg = 5e-4;
    double lr_infer = 1e-4;
    LossWeights weights;
    bool use_mca = true;
    bool use_brd = true;
    bool init_from_agg = true;
    bool use_dtl = true;
    std::string source_dir;
    std::string target_dir;
    std::string test_dir;
    std::string agg_checkpoint;
    std::string out_dir = "runs/default";
    std::size_t checkpoint_every = 0;  // 0: final checkpoint only

    std::size_t effective_constant_epochs() const {
        return constant_epochs != 0 ? constant_epochs : epochs * 2 / 3;
    }

    void validate() const {
        if (batch_size == 0) throw ConfigError("batch_size must be at least 1");
        if (epochs == 0) throw ConfigError("epochs must be at least 1");
        if (effective_constant_epochs() > epochs) throw ConfigError("constant_epochs exceeds epochs");
        if (!(lr_agg >= 0.0 && lr_infer >= 0.0)) throw ConfigError("learning rates must be nonnegative");
        try {
            weights.validate();
            model.validate();
        } catch (const std::exception& e) {
            throw ConfigError(e.what());
        }
    }

    /// Canonical key=value text, one key per line, fixed order.
    std::string to_text() const {
        std::ostringstream os;
        os.precision(17);
        for_each_field([&](const std::string& key, auto& value) { os << key << '=' << format(value) << '\n'; });
        return os.str();
    }

    static TrainConfig parse(const std::string& text) {
        TrainConfig cfg;
        std::map<std::string, std::function<void(const std::string&)>> setters;
        cfg.for_each_field([&](const std::string& key, auto& value) {
            setters[key] = [&value, key](const std::string& raw) { assign(value, raw, key); };
        });
        std::istringstream is(text);
        std::string line;
        std::size_t lineno = 0;
        while (std::getline(is, line)) {
            ++lineno;
            if (auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
            line = trim(line);
            if (line.empty()) continue;
            const auto eq = line.find('=');
            if (eq == std::string::npos)
                throw ConfigError("config line " + std::to_string(lineno) + ": expected key=value");
            const std::string key = trim(line.substr(0, eq));
            auto it = setters.find(key);
            if (it == setters.end()) throw ConfigError("config line " + std::to_string(lineno) + ": unknown key '" + key + "'");
            it->second(trim(line.substr(eq + 1)));
        }
        cfg.validate();
        return cfg;
    }

    static TrainConfig load(const std::filesystem::path& path) {
        std::ifstream is(path);
        if (!is) throw ConfigError("cannot read config " + path.string());
        std::stringstream ss;
        ss << is.rdbuf();
        return parse(ss.str());
    }

private:
    template <class F>
    void for_each_field(F&& f) {
        f("seed", seed);
        f("image_size", model.image_size);
        f("patch_size", model.patch_size);
        f("embed_dim", model.embed_dim);
        f("heads", model.heads);
        f("ffn_mult", model.ffn_mult);
        f("head_channels", model.head_channels);
        f("conv_width", model.conv_width);
        f("epochs", epochs);
        f("constant_epochs", constant_epochs);
        f("batch_size", batch_size);
        f("lr_agg", lr_agg);
        f("lr_infer", lr_infer);
        f("lambda", weights.lambda);
        f("alpha", weights.alpha);
        f("beta", weights.beta);
        f("gamma", weights.gamma);
        f("use_mca", use_mca);
        f("use_brd", use_brd);
        f("init_from_agg", init_from_agg);
        f("use_dtl", use_dtl);
        f("source_dir", source_dir);
        f("target_dir", target_dir);
        f("test_dir", test_dir);
        f("agg_checkpoint", agg_checkpoint);
        f("out_dir", out_dir);
        f("checkpoint_every", checkpoint_every);
    }
    template <class F>
    void for_each_field(F&& f) const {
        const_cast<TrainConfig*>(this)->for_each_field(std::forward<F>(f));
    }

    static std::string trim(const std::string& s) {
        const auto b = s.find_first_not_of(" \t\r");
        if (b == std::string::npos) return {};
        const auto e = s.find_last_not_of(" \t\r");
        return s.substr(b, e - b + 1);
    }

    static std::string format(bool v) { return v ? "true" : "false"; }
    static std::string format(const std::string& v) { return v; }
    static std::string format(double v) {
        std::ostringstream os;
        os.precision(17);
        os << v;
        return os.str();
    }
    template <class U>
    static std::string format(U v) {
        return std::to_string(v);
    }

    static void assign(bool& out, const std::string& raw, const std::string& key) {
        if (raw == "true" || raw == "1")
            out = true;
        else if (raw == "false" || raw == "0")
            out = false;
        else
            throw ConfigError("config key '" + key + "': expected true/false, got '" + raw + "'");
    }
    static void assign(std::string& out, const std::string& raw, const std::string&) { out = raw; }
    static void assign(double& out, const std::string& raw, const std::string& key) {
        try {
            std::size_t used = 0;
            out = std::stod(raw, &used);
            if (used != raw.size()) throw std::invalid_argument(raw);
        } catch (const std::exception&) {
            throw ConfigError("config key '" + key + "': expected a number, got '" + raw + "'");
        }
    }
    template <class U>
    static void assign(U& out, const std::string& raw, const std::string& key) {
        try {
            std::size_t used = 0;
            if (!raw.empty() && raw[0] == '-') throw std::invalid_argument(raw);
            out = static_cast<U>(std::stoull(raw, &used));
            if (used != raw.size()) throw std::invalid_argument(raw);
        } catch (const std::exception&) {
            throw ConfigError("config key '" + key + "': expected a nonnegative integer, got '" + raw + "'");
        }
    }
};

}  // namespace pfmda

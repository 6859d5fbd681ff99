#pragma once

// Checkpoint directory layout:
//   arch.txt      key=value model configuration plus network kind
//   manifest.csv  name,shape,file  (shape as AxBxC)
//   <name>.pfmt   one PFMT container per stored tensor

#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>
#include <string>

#include "pfmda/errors.hpp"
#include "pfmda/networks.hpp"
#include "pfmda/pfmt.hpp"

namespace pfmda {

enum class NetworkKind { Agg, Infer };

inline std::string to_string(NetworkKind k) { return k == NetworkKind::Agg ? "agg" : "infer"; }

struct Checkpoint {
    NetworkKind kind = NetworkKind::Agg;
    bool polymerized = true;
    DoseModel model;
};

inline void save_checkpoint(const std::filesystem::path& dir, const DoseModel& model, NetworkKind kind,
                            bool polymerized = true) {
    std::error_code ec;
    std::filesystem::create_directories(dir, ec);
    if (ec) throw std::runtime_error("cannot create checkpoint directory " + dir.string() + ": " + ec.message());
    const auto& c = model.config();
    {
        std::ofstream os(dir / "arch.txt", std::ios::trunc);
        os << "kind=" << to_string(kind) << '\n'
           << "polymerized=" << (polymerized ? 1 : 0) << '\n'
           << "image_size=" << c.image_size << '\n'
           << "patch_size=" << c.patch_size << '\n'
           << "in_channels=" << c.in_channels << '\n'
           << "embed_dim=" << c.embed_dim << '\n'
           << "heads=" << c.heads << '\n'
           << "ffn_mult=" << c.ffn_mult << '\n'
           << "head_channels=" << c.head_channels << '\n'
           << "conv_width=" << c.conv_width << '\n';
        if (!os) throw std::runtime_error("cannot write " + (dir / "arch.txt").string());
    }
    std::ofstream manifest(dir / "manifest.csv", std::ios::trunc);
    manifest << "name,shape,file\n";
    for (const auto& e : model.store().entries()) {
        const std::string file = e.name + ".pfmt";
        std::string shape;
        for (std::size_t i = 0; i < e.tensor.dim(); ++i) shape += (i ? "x" : "") + std::to_string(e.tensor.extent(i));
        manifest << e.name << ',' << shape << ',' << file << '\n';
        pfmt::write_tensor(dir / file, e.tensor);
    }
    if (!manifest) throw std::runtime_error("cannot write checkpoint manifest in " + dir.string());
}

inline Checkpoint load_checkpoint(const std::filesystem::path& dir) {
    std::ifstream arch(dir / "arch.txt");
    if (!arch) throw ConfigError("no checkpoint at " + dir.string() + " (missing arch.txt)");
    std::map<std::string, std::string> kv;
    std::string line;
    while (std::getline(arch, line)) {
        const auto eq = line.find('=');
        if (eq != std::string::npos) kv[line.substr(0, eq)] = line.substr(eq + 1);
    }
    auto num = [&](const char* key) -> std::size_t {
        auto it = kv.find(key);
        if (it == kv.end()) throw ConfigError("checkpoint arch.txt lacks " + std::string(key));
        return std::stoull(it->second);
    };
    ModelConfig cfg;
    cfg.image_size = num("image_size");
    cfg.patch_size = num("patch_size");
    cfg.in_channels = num("in_channels");
    cfg.embed_dim = num("embed_dim");
    cfg.heads = num("heads");
    cfg.ffn_mult = num("ffn_mult");
    cfg.head_channels = num("head_channels");
    cfg.conv_width = num("conv_width");
    const NetworkKind kind = kv["kind"] == "infer" ? NetworkKind::Infer : NetworkKind::Agg;
    Checkpoint ck{kind, num("polymerized") != 0, DoseModel(cfg, 0)};
    for (const auto& e : ck.model.store().entries()) {
        const Tensor loaded = pfmt::read_tensor(dir / (e.name + ".pfmt"));
        if (loaded.shape() != e.tensor.shape())
            throw ConfigError("checkpoint tensor " + e.name + " has shape " + shape_str(loaded.shape()) + ", expected " +
                              shape_str(e.tensor.shape()));
        Tensor dst = e.tensor;
        std::copy(loaded.data().begin(), loaded.data().end(), dst.data().begin());
    }
    return ck;
}

}  // namespace pfmda

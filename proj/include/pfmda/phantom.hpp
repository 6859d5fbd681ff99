#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <numbers>
#include <random>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include "pfmda/errors.hpp"
#include "pfmda/ops.hpp"
#include "pfmda/pfmt.hpp"
#include "pfmda/tensor.hpp"

namespace pfmda {

struct Range {
    double lo = 0.0;
    double hi = 0.0;

    template <class Rng>
    double sample(Rng& rng) const {
        return lo == hi ? lo : std::uniform_real_distribution<double>(lo, hi)(rng);
    }
};

/// Geometry priors for one synthetic domain. Coordinates are normalized so
/// the image spans [-1, 1] on both axes; +y points down (posterior).
struct DomainSpec {
    std::string name;
    std::uint64_t seed = 0;
    std::size_t image_size = 32;
    Range body_rx{0.80, 0.92};
    Range body_ry{0.62, 0.76};
    Range ptv_cx{-0.10, 0.10};
    Range ptv_cy{0.0, 0.0};
    Range ptv_rx{0.2, 0.3};
    Range ptv_ry{0.2, 0.3};
    std::size_t oar_min = 2;
    std::size_t oar_max = 3;
    Range oar_radius{0.10, 0.17};
    Range falloff{1.5, 2.5};   // c: dose drop per unit distance from the PTV
    Range sparing{0.1, 0.3};   // s: multiplicative dip inside OARs

    /// Rectum-like: posterior, larger PTV.
    static DomainSpec source_like(std::uint64_t seed = 1) {
        DomainSpec s;
        s.name = "source-like";
        s.seed = seed;
        s.ptv_cy = {0.12, 0.30};
        s.ptv_rx = {0.24, 0.34};
        s.ptv_ry = {0.20, 0.28};
        s.falloff = {1.4, 2.2};
        return s;
    }

    /// Cervix-like: central/anterior, smaller PTV, sharper falloff.
    static DomainSpec target_like(std::uint64_t seed = 2) {
        DomainSpec s;
        s.name = "target-like";
        s.seed = seed;
        s.ptv_cy = {-0.20, 0.0};
        s.ptv_rx = {0.16, 0.24};
        s.ptv_ry = {0.14, 0.22};
        s.falloff = {2.0, 3.0};
        return s;
    }

    static DomainSpec by_name(std::string_view name, std::uint64_t seed) {
        if (name == "source-like") return source_like(seed);
        if (name == "target-like") return target_like(seed);
        throw ContractError("unknown domain spec '" + std::string(name) + "' (expected source-like or target-like)");
    }

    /// Canonical text of every field; equal specs give equal text.
    std::string canonical() const {
        std::ostringstream os;
        os.precision(17);
        auto r = [&](const char* k, const Range& v) { os << k << '=' << v.lo << ':' << v.hi << ';'; };
        os << "name=" << name << ";seed=" << seed << ";size=" << image_size << ';';
        r("body_rx", body_rx);
        r("body_ry", body_ry);
        r("ptv_cx", ptv_cx);
        r("ptv_cy", ptv_cy);
        r("ptv_rx", ptv_rx);
        r("ptv_ry", ptv_ry);
        os << "oars=" << oar_min << ':' << oar_max << ';';
        r("oar_radius", oar_radius);
        r("falloff", falloff);
        r("sparing", sparing);
        return os.str();
    }
};

inline std::uint64_t fnv1a(std::string_view bytes, std::uint64_t h = 0xcbf29ce484222325ULL) {
    for (unsigned char c : bytes) {
        h ^= c;
        h *= 0x100000001b3ULL;
    }
    return h;
}

inline std::string hex64(std::uint64_t v) {
    char buf[17];
    std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(v));
    return buf;
}

struct Ellipse {
    double cx = 0.0, cy = 0.0, rx = 1.0, ry = 1.0;

    /// Elliptical radius; <= 1 inside.
    double radial(double u, double v) const {
        const double a = (u - cx) / rx, b = (v - cy) / ry;
        return std::sqrt(a * a + b * b);
    }
    bool contains(double u, double v) const { return radial(u, v) <= 1.0; }
};

struct CaseGeometry {
    Ellipse body;
    Ellipse ptv;
    std::vector<Ellipse> oars;
    double falloff = 2.0;
    double sparing = 0.2;
};

/// Distance from the PTV boundary measured along the ray from the PTV
/// center; zero inside the PTV. Non-decreasing along every such ray.
inline double ptv_distance(const Ellipse& ptv, double u, double v) {
    const double r = ptv.radial(u, v);
    if (r <= 1.0) return 0.0;
    const double len = std::hypot(u - ptv.cx, v - ptv.cy);
    return len * (1.0 - 1.0 / r);
}

inline bool in_any(const std::vector<Ellipse>& shapes, double u, double v) {
    return std::any_of(shapes.begin(), shapes.end(), [&](const Ellipse& e) { return e.contains(u, v); });
}

/// Analytic ground-truth dose at a normalized coordinate.
inline double dose_at(const CaseGeometry& g, double u, double v) {
    if (!g.body.contains(u, v)) return 0.0;
    const double falloff = std::clamp(1.0 - g.falloff * ptv_distance(g.ptv, u, v), 0.0, 1.0);
    return falloff * (in_any(g.oars, u, v) ? 1.0 - g.sparing : 1.0);
}

inline double pixel_coord(std::size_t index, std::size_t extent) {
    return (static_cast<double>(index) + 0.5) / static_cast<double>(extent) * 2.0 - 1.0;
}

/// One subject: three input channels plus the reference dose, each 1×H×W.
struct Case {
    std::string id;
    Tensor ct;
    Tensor ptv;
    Tensor oars;
    Tensor dose;
    Tensor body;  // derived; not stored on disk
    CaseGeometry geometry;  // populated only for freshly generated cases

    /// 3×H×W network input: CT, PTV mask, OARs mask.
    Tensor input() const {
        const std::size_t n = ct.numel();
        std::vector<double> v;
        v.reserve(3 * n);
        for (const Tensor* t : {&ct, &ptv, &oars}) v.insert(v.end(), t->values().begin(), t->values().end());
        return Tensor::from({3, ct.extent(1), ct.extent(2)}, std::move(v));
    }
};

namespace detail {

inline std::uint64_t splitmix64(std::uint64_t x) {
    x += 0x9e3779b97f4a7c15ULL;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
    return x ^ (x >> 31);
}

inline bool ellipse_inside(const Ellipse& inner, const Ellipse& outer, double margin) {
    for (int k = 0; k < 64; ++k) {
        const double a = 2.0 * std::numbers::pi * k / 64.0;
        if (outer.radial(inner.cx + inner.rx * std::cos(a), inner.cy + inner.ry * std::sin(a)) > margin) return false;
    }
    return true;
}

}  // namespace detail

inline constexpr double kBodyThreshold = 0.15;

/// Deterministic in (spec.seed, index).
inline Case generate_case(const DomainSpec& spec, std::size_t index) {
    const std::size_t size = spec.image_size;
    if (size == 0) throw ContractError("generate_case: image size must be positive");
    std::mt19937_64 rng(detail::splitmix64(detail::splitmix64(spec.seed) ^ static_cast<std::uint64_t>(index)));
    constexpr int kMaxAttempts = 100;

    auto pixels_in = [&](const Ellipse& e) {
        std::vector<std::size_t> out;
        for (std::size_t i = 0; i < size; ++i)
            for (std::size_t j = 0; j < size; ++j)
                if (e.contains(pixel_coord(j, size), pixel_coord(i, size))) out.push_back(i * size + j);
        return out;
    };

    CaseGeometry g;
    g.body = {0.0, 0.0, spec.body_rx.sample(rng), spec.body_ry.sample(rng)};
    int attempts = 0;
    std::vector<char> ptv_mask(size * size, 0), oar_mask(size * size, 0);
    for (;;) {
        if (++attempts > kMaxAttempts)
            throw GenerationError("cannot place PTV inside body for case " + std::to_string(index) + " after " +
                                  std::to_string(kMaxAttempts) + " attempts");
        g.ptv = {spec.ptv_cx.sample(rng), spec.ptv_cy.sample(rng), spec.ptv_rx.sample(rng), spec.ptv_ry.sample(rng)};
        if (!detail::ellipse_inside(g.ptv, g.body, 0.9)) continue;
        const auto px = pixels_in(g.ptv);
        if (px.empty()) continue;
        for (auto p : px) ptv_mask[p] = 1;
        break;
    }

    if (spec.oar_min == 0 || spec.oar_min > spec.oar_max) throw ContractError("generate_case: bad OAR count range");
    const std::size_t wanted = std::uniform_int_distribution<std::size_t>(spec.oar_min, spec.oar_max)(rng);
    attempts = 0;
    while (g.oars.size() < wanted) {
        if (++attempts > kMaxAttempts)
            throw GenerationError("cannot place " + std::to_string(wanted) + " OARs disjoint from the PTV for case " +
                                  std::to_string(index) + " after " + std::to_string(kMaxAttempts) + " attempts");
        Ellipse oar{Range{-0.75, 0.75}.sample(rng), Range{-0.6, 0.6}.sample(rng), spec.oar_radius.sample(rng),
                    spec.oar_radius.sample(rng)};
        if (!detail::ellipse_inside(oar, g.body, 0.95)) continue;
        const auto px = pixels_in(oar);
        if (px.empty()) continue;
        // Keep a one-pixel-width gap from the PTV in continuous space as well.
        const Ellipse grown{oar.cx, oar.cy, oar.rx + 2.0 / static_cast<double>(size),
                            oar.ry + 2.0 / static_cast<double>(size)};
        bool clash = false;
        for (auto p : pixels_in(grown)) clash = clash || ptv_mask[p] || oar_mask[p];
        if (clash) continue;
        for (auto p : px) oar_mask[p] = 1;
        g.oars.push_back(oar);
    }
    g.falloff = spec.falloff.sample(rng);
    g.sparing = spec.sparing.sample(rng);

    std::normal_distribution<double> tissue_noise(0.0, 0.03);
    std::uniform_real_distribution<double> air_noise(0.0, 0.04);
    const Ellipse spine{0.0, g.body.ry * 0.78, 0.12, 0.09};
    std::vector<double> ct(size * size), ptv(size * size), oars(size * size), dose(size * size), body(size * size);
    for (std::size_t i = 0; i < size; ++i)
        for (std::size_t j = 0; j < size; ++j) {
            const std::size_t p = i * size + j;
            const double u = pixel_coord(j, size), v = pixel_coord(i, size);
            const bool in_body = g.body.contains(u, v);
            body[p] = in_body ? 1.0 : 0.0;
            ptv[p] = ptv_mask[p] ? 1.0 : 0.0;
            oars[p] = oar_mask[p] ? 1.0 : 0.0;
            if (in_body) {
                double hu = 0.35 + std::clamp(tissue_noise(rng), -0.1, 0.1);
                if (spine.contains(u, v)) hu = 0.85;
                if (oar_mask[p]) hu += 0.15;
                if (ptv_mask[p]) hu += 0.05;
                ct[p] = std::clamp(hu, 0.2, 1.0);
            } else {
                ct[p] = air_noise(rng);
            }
            dose[p] = dose_at(g, u, v);
        }
    Case c;
    char id[32];
    std::snprintf(id, sizeof id, "case_%04zu", index);
    c.id = id;
    c.ct = Tensor::from({1, size, size}, std::move(ct));
    c.ptv = Tensor::from({1, size, size}, std::move(ptv));
    c.oars = Tensor::from({1, size, size}, std::move(oars));
    c.dose = Tensor::from({1, size, size}, std::move(dose));
    c.body = Tensor::from({1, size, size}, std::move(body));
    c.geometry = std::move(g);
    return c;
}

/// Hash of a case's stored channels.
inline std::uint64_t case_content_hash(const Case& c, std::uint64_t h = 0xcbf29ce484222325ULL) {
    for (const Tensor* t : {&c.ct, &c.ptv, &c.oars, &c.dose}) {
        const auto bytes = pfmt::encode(*t);
        h = fnv1a(std::string_view(reinterpret_cast<const char*>(bytes.data()), bytes.size()), h);
    }
    return h;
}

struct ManifestRow {
    std::string id;
    std::string path;
    std::string domain;
    std::string seed_fingerprint;
};

struct Manifest {
    std::filesystem::path file;
    std::vector<ManifestRow> rows;

    /// Fingerprint of the whole dataset: hash over every row's fingerprint.
    std::string fingerprint() const {
        std::uint64_t h = 0xcbf29ce484222325ULL;
        for (const auto& r : rows) h = fnv1a(r.id + ":" + r.seed_fingerprint + ";", h);
        return hex64(h);
    }
};

inline constexpr const char* kManifestName = "manifest.csv";

inline Manifest read_manifest(const std::filesystem::path& dir) {
    Manifest m;
    m.file = dir / kManifestName;
    std::ifstream is(m.file);
    if (!is) throw ConfigError("missing dataset manifest " + m.file.string());
    std::string line;
    std::getline(is, line);
    if (line != "id,path,domain,seed_fingerprint") throw ConfigError("unexpected manifest header in " + m.file.string());
    while (std::getline(is, line)) {
        if (line.empty()) continue;
        std::stringstream ss(line);
        ManifestRow r;
        std::getline(ss, r.id, ',');
        std::getline(ss, r.path, ',');
        std::getline(ss, r.domain, ',');
        std::getline(ss, r.seed_fingerprint, ',');
        m.rows.push_back(r);
    }
    return m;
}

/// Writes case_0000 … case_{n-1}, each with ct/ptv/oars/dose .pfmt files, and a manifest.
inline Manifest generate_dataset(const DomainSpec& spec, std::size_t n, const std::filesystem::path& out_dir) {
    if (n == 0) throw ContractError("generate_dataset: n must be at least 1");
    std::error_code ec;
    std::filesystem::create_directories(out_dir, ec);
    if (ec) throw std::runtime_error("cannot create " + out_dir.string() + ": " + ec.message());
    const std::uint64_t spec_hash = fnv1a(spec.canonical());
    Manifest m;
    m.file = out_dir / kManifestName;
    for (std::size_t i = 0; i < n; ++i) {
        const Case c = generate_case(spec, i);
        const auto dir = out_dir / c.id;
        std::filesystem::create_directories(dir, ec);
        if (ec) throw std::runtime_error("cannot create " + dir.string() + ": " + ec.message());
        pfmt::write_tensor(dir / "ct.pfmt", c.ct);
        pfmt::write_tensor(dir / "ptv.pfmt", c.ptv);
        pfmt::write_tensor(dir / "oars.pfmt", c.oars);
        pfmt::write_tensor(dir / "dose.pfmt", c.dose);
        m.rows.push_back({c.id, c.id, spec.name, hex64(case_content_hash(c, spec_hash))});
    }
    std::ofstream os(m.file, std::ios::trunc);
    if (!os) throw std::runtime_error("cannot write " + m.file.string());
    os << "id,path,domain,seed_fingerprint\n";
    for (const auto& r : m.rows) os << r.id << ',' << r.path << ',' << r.domain << ',' << r.seed_fingerprint << '\n';
    return m;
}

inline Case load_case(const std::filesystem::path& dir, const std::string& id) {
    Case c;
    c.id = id;
    c.ct = pfmt::read_tensor(dir / "ct.pfmt");
    c.ptv = pfmt::read_tensor(dir / "ptv.pfmt");
    c.oars = pfmt::read_tensor(dir / "oars.pfmt");
    c.dose = pfmt::read_tensor(dir / "dose.pfmt");
    for (const Tensor* t : {&c.ptv, &c.oars, &c.dose})
        if (t->shape() != c.ct.shape() || c.ct.dim() != 3 || c.ct.extent(0) != 1)
            throw ConfigError("case " + dir.string() + " has inconsistent channel shapes");
    std::vector<double> body(c.ct.numel());
    for (std::size_t i = 0; i < body.size(); ++i) body[i] = c.ct[i] >= kBodyThreshold ? 1.0 : 0.0;
    c.body = Tensor::from(c.ct.shape(), std::move(body));
    return c;
}

inline std::vector<Case> load_dataset(const std::filesystem::path& dir) {
    const auto m = read_manifest(dir);
    std::vector<Case> cases;
    cases.reserve(m.rows.size());
    for (const auto& r : m.rows) cases.push_back(load_case(dir / r.path, r.id));
    if (cases.empty()) throw ConfigError("dataset " + dir.string() + " is empty");
    return cases;
}

}  // namespace pfmda

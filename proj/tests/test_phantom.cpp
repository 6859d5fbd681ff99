#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>
#include <random>

#include "pfmda/pfmda.hpp"

using namespace pfmda;
namespace fs = std::filesystem;

namespace {

fs::path scratch(const std::string& name) {
    const auto p = fs::temp_directory_path() / ("pfmda_phantom_" + name);
    fs::remove_all(p);
    fs::create_directories(p);
    return p;
}

std::vector<std::uint8_t> slurp(const fs::path& p) {
    std::ifstream is(p, std::ios::binary);
    return {std::istreambuf_iterator<char>(is), std::istreambuf_iterator<char>()};
}

}  // namespace

TEST(GenerateCase, Invariants) {
    for (const auto& spec : {DomainSpec::source_like(), DomainSpec::target_like()}) {
        for (std::size_t idx = 0; idx < 30; ++idx) {
            const Case c = generate_case(spec, idx);
            std::size_t ptv = 0;
            for (std::size_t i = 0; i < c.dose.numel(); ++i) {
                EXPECT_FALSE(c.ptv[i] > 0.5 && c.oars[i] > 0.5);
                EXPECT_GE(c.dose[i], 0.0);
                EXPECT_LE(c.dose[i], 1.0);
                EXPECT_GE(c.ct[i], 0.0);
                EXPECT_LE(c.ct[i], 1.0);
                if (c.body[i] < 0.5) {
                    EXPECT_EQ(c.dose[i], 0.0);
                }
                if (c.ptv[i] > 0.5) {
                    EXPECT_EQ(c.dose[i], 1.0);
                    ++ptv;
                }
            }
            EXPECT_GT(ptv, 0u);
            EXPECT_EQ(c.dose.shape(), (Shape{1, 32, 32}));
        }
    }
}

TEST(GenerateCase, DeterministicReplay) {
    const auto spec = DomainSpec::target_like(5);
    const Case a = generate_case(spec, 7), b = generate_case(spec, 7), c = generate_case(spec, 8);
    EXPECT_EQ(a.id, "case_0007");
    for (auto m : {&Case::ct, &Case::ptv, &Case::oars, &Case::dose}) EXPECT_EQ((a.*m).values(), (b.*m).values());
    EXPECT_NE(a.dose.values(), c.dose.values());
}

TEST(GenerateCase, DoseFallsOffAlongRaysOutsideOars) {
    const Case c = generate_case(DomainSpec::source_like(), 3);
    const auto& g = c.geometry;
    for (int k = 0; k < 64; ++k) {
        const double ang = 2.0 * std::numbers::pi * k / 64.0;
        double prev = 1.0;
        for (double t = 0.0; t < 2.0; t += 0.01) {
            const double u = g.ptv.cx + t * std::cos(ang), v = g.ptv.cy + t * std::sin(ang);
            if (in_any(g.oars, u, v)) continue;
            const double d = dose_at(g, u, v);
            EXPECT_LE(d, prev + 1e-15);
            prev = d;
        }
    }
}

TEST(GenerateCase, DomainsDiffer) {
    double src_area = 0.0, tgt_area = 0.0;
    for (std::size_t i = 0; i < 20; ++i) {
        src_area += sum(generate_case(DomainSpec::source_like(), i).ptv).item();
        tgt_area += sum(generate_case(DomainSpec::target_like(), i).ptv).item();
    }
    EXPECT_GT(src_area, tgt_area);
}

TEST(GenerateCase, ImpossibleGeometryFails) {
    DomainSpec spec = DomainSpec::source_like();
    spec.ptv_rx = {0.95, 0.99};
    spec.ptv_ry = {0.95, 0.99};
    EXPECT_THROW(generate_case(spec, 0), GenerationError);
    EXPECT_THROW(DomainSpec::by_name("elbow", 1), ContractError);
}

TEST(Pfmt, LayoutSize) {
    const auto bytes = pfmt::encode(Tensor::from({2, 2}, {1, 2, 3, 4}));
    EXPECT_EQ(bytes.size(), 50u);
    EXPECT_EQ(std::string(bytes.begin(), bytes.begin() + 4), "PFMT");
    EXPECT_EQ(bytes[4], 0x01);
    EXPECT_EQ(bytes[5], 0x01);
    EXPECT_EQ(bytes[6], 2);
    EXPECT_EQ(bytes[10], 2);
    // 1.0 little-endian: 00 .. 00 f0 3f
    EXPECT_EQ(bytes[18 + 6], 0xf0);
    EXPECT_EQ(bytes[18 + 7], 0x3f);
}

TEST(Pfmt, RoundTripAllRanks) {
    std::mt19937_64 rng(1);
    const auto dir = scratch("rt");
    for (const Shape& s : {Shape{}, Shape{5}, Shape{3, 4}, Shape{2, 3, 4}, Shape{2, 1, 3, 2}, Shape{0, 3}}) {
        Tensor t = Tensor::randn(s, rng, 1e3);
        if (t.numel() > 0) t.data()[0] = -0.0;
        const auto path = dir / "t.pfmt";
        pfmt::write_tensor(path, t);
        const Tensor back = pfmt::read_tensor(path);
        EXPECT_EQ(back.shape(), s);
        EXPECT_EQ(slurp(path), pfmt::encode(back));
        for (std::size_t i = 0; i < t.numel(); ++i)
            EXPECT_EQ(std::bit_cast<std::uint64_t>(back[i]), std::bit_cast<std::uint64_t>(t[i]));
    }
}

TEST(Pfmt, TruncatedPayloadNamesLengths) {
    auto bytes = pfmt::encode(Tensor::from({2, 2}, {1, 2, 3, 4}));
    bytes.resize(45);
    try {
        pfmt::decode(bytes);
        FAIL() << "expected FormatError";
    } catch (const FormatError& e) {
        EXPECT_EQ(e.offset(), 45u);
        const std::string msg = e.what();
        EXPECT_NE(msg.find("expected 50"), std::string::npos) << msg;
        EXPECT_NE(msg.find("actual 45"), std::string::npos) << msg;
        EXPECT_NE(msg.find("offset 45"), std::string::npos) << msg;
    }
}

TEST(Pfmt, CorruptHeaders) {
    const auto good = pfmt::encode(Tensor::from({3}, {1, 2, 3}));
    auto bad_magic = good;
    bad_magic[0] = 'X';
    auto bad_version = good;
    bad_version[4] = 2;
    auto bad_dtype = good;
    bad_dtype[5] = 7;
    auto huge_extent = good;
    huge_extent[10] = huge_extent[11] = huge_extent[12] = huge_extent[13] = 0xff;
    auto trailing = good;
    trailing.push_back(0);
    const std::vector<std::pair<std::vector<std::uint8_t>, std::size_t>> cases{
        {bad_magic, 0}, {bad_version, 4}, {bad_dtype, 5}, {huge_extent, good.size()}, {trailing, good.size()},
        {std::vector<std::uint8_t>(good.begin(), good.begin() + 3), 3}, {std::vector<std::uint8_t>(good.begin(), good.begin() + 12), 12}};
    for (const auto& [bytes, offset] : cases) {
        try {
            pfmt::decode(bytes);
            ADD_FAILURE() << "accepted corrupt container of " << bytes.size() << " bytes";
        } catch (const FormatError& e) {
            EXPECT_EQ(e.offset(), offset) << e.what();
        }
    }
}

TEST(Pfmt, ReadErrorMentionsPath) {
    const auto dir = scratch("bad");
    std::ofstream(dir / "x.pfmt", std::ios::binary) << "PFM";
    try {
        pfmt::read_tensor(dir / "x.pfmt");
        FAIL();
    } catch (const FormatError& e) {
        EXPECT_NE(std::string(e.what()).find("x.pfmt"), std::string::npos);
        EXPECT_EQ(std::string(e.what()).find("offset 3) (at"), std::string::npos);
    }
}

TEST(Dataset, SingleCaseLayout) {
    const auto dir = scratch("one");
    const Manifest m = generate_dataset(DomainSpec::source_like(), 1, dir);
    ASSERT_EQ(m.rows.size(), 1u);
    std::size_t dirs = 0;
    for (const auto& e : fs::directory_iterator(dir)) dirs += e.is_directory();
    EXPECT_EQ(dirs, 1u);
    std::size_t files = 0;
    for (const auto& e : fs::directory_iterator(dir / "case_0000")) files += e.is_regular_file();
    EXPECT_EQ(files, 4u);
    EXPECT_EQ(read_manifest(dir).rows.size(), 1u);
    EXPECT_THROW(generate_dataset(DomainSpec::source_like(), 0, dir), ContractError);
}

TEST(Dataset, FingerprintsAndReload) {
    const auto a = scratch("fa"), b = scratch("fb"), c = scratch("fc");
    const auto ma = generate_dataset(DomainSpec::target_like(), 4, a);
    const auto mb = generate_dataset(DomainSpec::target_like(), 4, b);
    const auto mc = generate_dataset(DomainSpec::target_like(3), 4, c);
    EXPECT_EQ(ma.fingerprint(), mb.fingerprint());
    EXPECT_NE(ma.fingerprint(), mc.fingerprint());
    EXPECT_EQ(read_manifest(a).fingerprint(), ma.fingerprint());

    const auto loaded = load_dataset(a);
    ASSERT_EQ(loaded.size(), 4u);
    for (std::size_t i = 0; i < 4; ++i) {
        const Case fresh = generate_case(DomainSpec::target_like(), i);
        EXPECT_EQ(loaded[i].dose.values(), fresh.dose.values());
        EXPECT_EQ(loaded[i].body.values(), fresh.body.values());
    }
    EXPECT_THROW(load_dataset(scratch("empty")), ConfigError);
}

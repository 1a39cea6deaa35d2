#include "oracles.hpp"
#include "test_util.hpp"
#include "vsg/error.hpp"
#include "vsg/volio.hpp"

#include <doctest.h>

#include <cmath>
#include <cstring>
#include <limits>
#include <random>
#include <set>

using namespace vsg;

namespace {

Volume random_volume(std::mt19937_64& rng) {
  std::uniform_int_distribution<int> ext(1, 9), ch(1, 4);
  std::uniform_real_distribution<float> sp(0.3f, 3.f);
  std::normal_distribution<float> val(0.f, 100.f);
  Volume v(ch(rng), {ext(rng), ext(rng), ext(rng)}, {sp(rng), sp(rng), sp(rng)});
  for (Eigen::Index i = 0; i < v.data.size(); ++i) v.data[i] = val(rng);
  return v;
}

}  // namespace

TEST_CASE("labels map to contiguous classes and back") {
  for (int c = 0; c < kClassCount; ++c) CHECK(label_to_class(class_to_label(c)) == c);
  CHECK(label_to_class(4) == 3);
  CHECK_THROWS_AS(label_to_class(3), ValidationError);
  CHECK_THROWS_AS(class_to_label(4), ValidationError);
  CHECK(is_valid_label(2));
  CHECK_FALSE(is_valid_label(5));
}

TEST_CASE("region membership follows the nested label convention") {
  LabelMap m({4, 1, 1});
  m.data = {0, 1, 2, 4};
  const auto et = extract_region(m, Region::et());
  const auto tc = extract_region(m, Region::tc());
  const auto wt = extract_region(m, Region::wt());
  CHECK(et.data == std::vector<std::uint8_t>{0, 0, 0, 1});
  CHECK(tc.data == std::vector<std::uint8_t>{0, 1, 0, 1});
  CHECK(wt.data == std::vector<std::uint8_t>{0, 1, 1, 1});

  LabelMap empty({3, 3, 3});
  for (const auto& r : Region::all()) CHECK(extract_region(empty, r).count() == 0);
}

TEST_CASE("regions are nested on random label maps") {
  std::mt19937_64 rng(7);
  for (int t = 0; t < 20; ++t) {
    const auto m = oracle::random_labels({6, 5, 4}, rng);
    const auto et = extract_region(m, Region::et());
    const auto tc = extract_region(m, Region::tc());
    const auto wt = extract_region(m, Region::wt());
    for (std::size_t i = 0; i < m.data.size(); ++i) {
      CHECK(et.data[i] <= tc.data[i]);
      CHECK(tc.data[i] <= wt.data[i]);
    }
  }
}

TEST_CASE("standardization gives zero mean and unit deviation over nonzero voxels") {
  Volume v(1, {4, 1, 1});
  v.data << 0.f, 2.f, 4.f, 0.f;
  const auto s = standardize_intensity(v);
  CHECK(s.data[0] == 0.f);
  CHECK(s.data[1] == doctest::Approx(-1.0).epsilon(1e-6));
  CHECK(s.data[2] == doctest::Approx(1.0).epsilon(1e-6));
  CHECK(s.data[3] == 0.f);

  std::mt19937_64 rng(3);
  std::normal_distribution<float> d(50.f, 9.f);
  Volume w(2, {6, 6, 6});
  for (Eigen::Index i = 0; i < w.data.size(); ++i) w.data[i] = (i % 5 == 0) ? 0.f : d(rng);
  const auto once = standardize_intensity(w);
  for (int c = 0; c < 2; ++c) {
    double sum = 0, sq = 0;
    int n = 0;
    for (auto x : once.channel(c))
      if (x != 0.f) {
        sum += x;
        sq += double(x) * x;
        ++n;
      }
    const double mean = sum / n;
    CHECK(std::abs(mean) < 1e-6);
    CHECK(std::abs(std::sqrt(sq / n - mean * mean) - 1.0) < 1e-6);
  }
  const auto twice = standardize_intensity(once);
  CHECK(((twice.data - once.data).abs() <= 1e-6f).all());
}

TEST_CASE("standardization rejects degenerate channels") {
  Volume zero(1, {3, 3, 3});
  CHECK_THROWS_AS(standardize_intensity(zero), DegenerateChannelError);
  Volume constant(1, {3, 3, 3});
  constant.data.setConstant(5.f);
  CHECK_THROWS_AS(standardize_intensity(constant), DegenerateChannelError);
}

TEST_CASE("phantoms have nested shells and separate ET from edema") {
  PhantomSpec spec;
  spec.seed = 11;
  const auto [vol, lab] = generate_phantom(spec);
  CHECK(vol.channels == 4);
  CHECK(vol.dims == Dims3{32, 32, 32});
  const auto et = extract_region(lab, Region::et()).count();
  const auto tc = extract_region(lab, Region::tc()).count();
  const auto wt = extract_region(lab, Region::wt()).count();
  CHECK(0 < et);
  CHECK(et < tc);
  CHECK(tc < wt);

  const auto d = lab.dims;
  for (std::int64_t z = 1; z + 1 < d[2]; ++z)
    for (std::int64_t y = 1; y + 1 < d[1]; ++y)
      for (std::int64_t x = 1; x + 1 < d[0]; ++x) {
        if (lab.at(x, y, z) != kEnhancing) continue;
        CHECK(lab.at(x + 1, y, z) != kEdema);
        CHECK(lab.at(x - 1, y, z) != kEdema);
        CHECK(lab.at(x, y + 1, z) != kEdema);
        CHECK(lab.at(x, y - 1, z) != kEdema);
        CHECK(lab.at(x, y, z + 1) != kEdema);
        CHECK(lab.at(x, y, z - 1) != kEdema);
      }
}

TEST_CASE("phantoms are deterministic and noise free channels are piecewise constant") {
  PhantomSpec spec;
  spec.seed = 5;
  const auto a = generate_phantom(spec);
  const auto b = generate_phantom(spec);
  CHECK(same_contents(a.first, b.first));
  CHECK(a.second == b.second);

  spec.noise_sigma = 0.f;
  const auto [vol, lab] = generate_phantom(spec);
  for (std::int64_t c = 0; c < vol.channels; ++c) {
    std::map<std::uint8_t, std::set<float>> values;
    for (std::int64_t i = 0; i < lab.voxels(); ++i) values[lab.data[i]].insert(vol.channel(c)[i]);
    for (const auto& [label, vals] : values) CHECK(vals.size() == 1);
  }
}

TEST_CASE("phantom specs are validated") {
  PhantomSpec spec;
  spec.radii = {3.f, 6.f, 10.f};
  CHECK_THROWS_AS(generate_phantom(spec), SpecError);
  spec.radii = {20.f, 6.f, 3.f};
  CHECK_THROWS_AS(generate_phantom(spec), SpecError);
  spec = {};
  spec.grid_size = {7, 32, 32};
  CHECK_THROWS_AS(generate_phantom(spec), SpecError);
}

TEST_CASE("phantom series stays inside the grid") {
  const auto specs = phantom_series(6, {32, 32, 32}, 2);
  CHECK(specs.size() == 6);
  for (const auto& s : specs) CHECK_NOTHROW(generate_phantom(s));
  CHECK(specs[0].seed != specs[1].seed);
}

TEST_CASE("volumes round trip bit exactly") {
  testutil::TempDir dir("volio");
  std::mt19937_64 rng(42);
  for (int t = 0; t < 50; ++t) {
    const auto v = random_volume(rng);
    write_volume(v, dir / "v.vsg");
    const auto r = read_volume(dir / "v.vsg");
    CHECK(same_contents(v, r));
    CHECK(std::memcmp(v.data.data(), r.data.data(), sizeof(float) * v.data.size()) == 0);
    CHECK(r.channel_names == default_channel_names(v.channels));
  }
  CHECK(dir.entry_count() == 1);
}

TEST_CASE("label maps round trip") {
  testutil::TempDir dir("volio");
  std::mt19937_64 rng(9);
  for (int t = 0; t < 10; ++t) {
    auto m = oracle::random_labels({5, 7, 3}, rng);
    m.spacing = {0.5f, 1.f, 2.5f};
    write_label_map(m, dir / "m.vsg");
    CHECK(read_label_map(dir / "m.vsg") == m);
  }
}

TEST_CASE("zero volume file layout") {
  testutil::TempDir dir("volio");
  write_volume(Volume(1, {4, 4, 4}), dir / "z.vsg");
  CHECK(std::filesystem::file_size(dir / "z.vsg") == 53 + 256);
  CHECK(vsg1_header_size(4) == 53);
  const auto bytes = testutil::slurp(dir / "z.vsg");
  CHECK(bytes.substr(0, 4) == "VSG1");

  write_volume(Volume(2, {8, 8, 8}), dir / "z2.vsg");
  const auto r = read_volume(dir / "z2.vsg");
  CHECK(r.data.size() == 1024);
  CHECK((r.data == 0.f).all());
}

TEST_CASE("bad files are rejected") {
  testutil::TempDir dir("volio");
  Volume v(1, {2, 2, 2});
  write_volume(v, dir / "ok.vsg");
  const auto good = testutil::slurp(dir / "ok.vsg");

  auto bad = good;
  bad[0] = 'X';
  testutil::spit(dir / "magic.vsg", bad);
  CHECK_THROWS_AS(read_volume(dir / "magic.vsg"), FormatError);

  testutil::spit(dir / "short.vsg", good.substr(0, good.size() - 1));
  CHECK_THROWS_AS(read_volume(dir / "short.vsg"), CorruptFileError);
  testutil::spit(dir / "long.vsg", good + "x");
  CHECK_THROWS_AS(read_volume(dir / "long.vsg"), CorruptFileError);
  testutil::spit(dir / "header.vsg", good.substr(0, 10));
  CHECK_THROWS_AS(read_volume(dir / "header.vsg"), Error);

  CHECK_THROWS_AS(read_label_map(dir / "ok.vsg"), FormatError);
  CHECK_THROWS_AS(read_volume(dir / "missing.vsg"), IoError);

  auto nan = good;
  const float q = std::numeric_limits<float>::quiet_NaN();
  std::memcpy(nan.data() + vsg1_header_size(4), &q, sizeof q);
  testutil::spit(dir / "nan.vsg", nan);
  CHECK_THROWS_AS(read_volume(dir / "nan.vsg"), ValidationError);
}

TEST_CASE("invalid data is rejected before anything is written") {
  testutil::TempDir dir("volio");
  Volume v(1, {2, 2, 2});
  v.data[3] = std::numeric_limits<float>::quiet_NaN();
  CHECK_THROWS_AS(write_volume(v, dir / "nan.vsg"), ValidationError);
  LabelMap m({2, 2, 2});
  m.data[0] = 3;
  CHECK_THROWS_AS(write_label_map(m, dir / "bad.vsg"), ValidationError);
  Volume s(1, {2, 2, 2}, {1.f, 0.f, 1.f});
  CHECK_THROWS_AS(write_volume(s, dir / "spacing.vsg"), ValidationError);
  CHECK(dir.entry_count() == 0);
}

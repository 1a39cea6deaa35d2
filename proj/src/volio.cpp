#include "vsg/volio.hpp"

#include "byteio.hpp"
#include "vsg/error.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <random>
#include <sstream>

namespace vsg {

namespace {

constexpr char kMagic[4] = {'V', 'S', 'G', '1'};
constexpr std::uint8_t kDtypeF32 = 0;
constexpr std::uint8_t kDtypeU8 = 1;

struct Header {
  std::vector<std::uint64_t> dims;
  Spacing3 spacing;
  std::uint8_t dtype;
};

void write_header(detail::ByteWriter& w, const std::vector<std::uint64_t>& dims, const Spacing3& spacing,
                  std::uint8_t dtype) {
  w.put_bytes(std::string_view(kMagic, 4));
  w.put(static_cast<std::uint32_t>(dims.size()));
  for (auto d : dims) w.put(d);
  for (float s : spacing) w.put(s);
  w.put(dtype);
}

Header read_header(detail::ByteReader& r, const std::string& what) {
  r.need(4);
  auto magic = r.get_bytes(4);
  if (std::memcmp(magic.data(), kMagic, 4) != 0) throw FormatError(what + ": bad magic, not a VSG1 file");
  Header h;
  auto ndims = r.get<std::uint32_t>();
  if (ndims == 0 || ndims > 8) throw FormatError(what + ": unsupported dimension count " + std::to_string(ndims));
  h.dims.resize(ndims);
  for (auto& d : h.dims) {
    d = r.get<std::uint64_t>();
    if (d == 0 || d > (std::uint64_t{1} << 32)) throw FormatError(what + ": invalid extent " + std::to_string(d));
  }
  for (auto& s : h.spacing) s = r.get<float>();
  h.dtype = r.get<std::uint8_t>();
  return h;
}

void check_spacing(const Spacing3& s, const std::string& what) {
  for (float v : s)
    if (!(v > 0.f) || !std::isfinite(v)) throw ValidationError(what + ": spacing components must be positive and finite");
}

}  // namespace

std::string detail::read_file_bytes(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path);
  std::ostringstream ss;
  ss << in.rdbuf();
  return std::move(ss).str();
}

void write_file_atomic(const std::filesystem::path& path, const std::string& bytes) {
  auto tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot open " + tmp.string() + " for writing");
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    out.flush();
    if (!out) {
      out.close();
      std::error_code ec;
      std::filesystem::remove(tmp, ec);
      throw IoError("write failed: " + tmp.string());
    }
  }
  std::error_code ec;
  std::filesystem::rename(tmp, path, ec);
  if (ec) {
    std::filesystem::remove(tmp, ec);
    throw IoError("cannot rename onto " + path.string());
  }
}

// ---------------------------------------------------------------------------
// Volume / LabelMap

Volume::Volume(std::int64_t channels, Dims3 dims, Spacing3 spacing)
    : channels(channels),
      dims(dims),
      spacing(spacing),
      channel_names(default_channel_names(channels)),
      data(Eigen::ArrayXf::Zero(channels * voxel_count(dims))) {}

void Volume::validate() const {
  if (channels < 1) throw ValidationError("volume needs at least one channel");
  for (auto d : dims)
    if (d < 1) throw ValidationError("volume extents must be positive");
  check_spacing(spacing, "volume");
  if (data.size() != channels * voxels()) throw ValidationError("volume payload size does not match its dims");
  if (!data.isFinite().all()) throw ValidationError("volume contains non-finite values");
}

bool same_contents(const Volume& a, const Volume& b) {
  if (a.channels != b.channels || a.dims != b.dims || a.spacing != b.spacing || a.data.size() != b.data.size())
    return false;
  return std::memcmp(a.data.data(), b.data.data(), sizeof(float) * static_cast<std::size_t>(a.data.size())) == 0;
}

std::vector<std::string> default_channel_names(std::int64_t channels) {
  if (channels == 4) return {"T1", "T2", "FLAIR", "T1ce"};
  std::vector<std::string> names;
  for (std::int64_t c = 0; c < channels; ++c) names.push_back("C" + std::to_string(c));
  return names;
}

bool is_valid_label(std::uint8_t v) { return v == 0 || v == 1 || v == 2 || v == 4; }

int label_to_class(std::uint8_t label) {
  switch (label) {
    case 0: return 0;
    case 1: return 1;
    case 2: return 2;
    case 4: return 3;
    default: throw ValidationError("invalid label value " + std::to_string(label));
  }
}

std::uint8_t class_to_label(int cls) {
  if (cls < 0 || cls >= kClassCount) throw ValidationError("invalid class index " + std::to_string(cls));
  return kLabelSet[static_cast<std::size_t>(cls)];
}

LabelMap::LabelMap(Dims3 dims, Spacing3 spacing)
    : dims(dims), spacing(spacing), data(static_cast<std::size_t>(voxel_count(dims)), 0) {}

void LabelMap::validate() const {
  for (auto d : dims)
    if (d < 1) throw ValidationError("label map extents must be positive");
  check_spacing(spacing, "label map");
  if (static_cast<std::int64_t>(data.size()) != voxels())
    throw ValidationError("label map payload size does not match its dims");
  for (auto v : data)
    if (!is_valid_label(v)) throw ValidationError("label map contains invalid label " + std::to_string(v));
}

std::int64_t Mask::count() const { return std::count(data.begin(), data.end(), std::uint8_t{1}); }

const std::array<Region, 3>& Region::all() {
  static const std::array<Region, 3> regions{Region::et(), Region::tc(), Region::wt()};
  return regions;
}

bool Region::contains(std::uint8_t label) const {
  return std::find(member_labels.begin(), member_labels.end(), label) != member_labels.end();
}

std::string to_string(RegionName r) {
  switch (r) {
    case RegionName::ET: return "ET";
    case RegionName::TC: return "TC";
    case RegionName::WT: return "WT";
  }
  return "?";
}

Mask extract_region(const LabelMap& m, const Region& r) {
  std::array<std::uint8_t, 256> member{};
  for (auto l : r.member_labels) member[l] = 1;
  Mask out(m.dims);
  for (std::size_t i = 0; i < m.data.size(); ++i) out.data[i] = member[m.data[i]];
  return out;
}

Volume standardize_intensity(const Volume& v) {
  v.validate();
  Volume out = v;
  for (std::int64_t c = 0; c < v.channels; ++c) {
    auto src = v.channel(c);
    double sum = 0.0;
    std::int64_t n = 0;
    for (Eigen::Index i = 0; i < src.size(); ++i) {
      if (src[i] != 0.f) {
        sum += src[i];
        ++n;
      }
    }
    if (n < 2) throw DegenerateChannelError("channel " + std::to_string(c) + " has fewer than two nonzero voxels");
    const double mean = sum / static_cast<double>(n);
    double sq = 0.0;
    for (Eigen::Index i = 0; i < src.size(); ++i)
      if (src[i] != 0.f) sq += (src[i] - mean) * (src[i] - mean);
    const double sd = std::sqrt(sq / static_cast<double>(n));
    if (!(sd > 0.0)) throw DegenerateChannelError("channel " + std::to_string(c) + " is constant over nonzero voxels");
    auto dst = out.channel(c);
    for (Eigen::Index i = 0; i < src.size(); ++i)
      if (src[i] != 0.f) dst[i] = static_cast<float>((src[i] - mean) / sd);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Phantom

namespace {

// Mean intensity per (label class, channel) for channels T1, T2, FLAIR, T1ce.
// ET is bright on T1ce, the necrotic core dark.
constexpr float kPhantomMeans[4][4] = {
    {1.0f, 1.0f, 1.0f, 1.0f},  // background
    {0.5f, 1.6f, 1.4f, 0.4f},  // necrotic core
    {0.8f, 1.8f, 2.0f, 0.9f},  // edema
    {0.9f, 1.3f, 1.5f, 2.2f},  // enhancing
};

}  // namespace

std::pair<Volume, LabelMap> generate_phantom(const PhantomSpec& spec) {
  for (auto g : spec.grid_size)
    if (g < 8) throw SpecError("phantom grid extents must be at least 8");
  const auto& r = spec.radii;
  if (!(r[2] > 0.f && r[1] > r[2] && r[0] > r[1])) throw SpecError("phantom radii must be positive and strictly decreasing");
  if (spec.noise_sigma < 0.f || !std::isfinite(spec.noise_sigma)) throw SpecError("noise sigma must be finite and >= 0");
  for (int a = 0; a < 3; ++a) {
    if (spec.center[a] - r[0] < 0.f || spec.center[a] + r[0] > static_cast<float>(spec.grid_size[a] - 1))
      throw SpecError("phantom radii exceed the grid");
  }
  check_spacing(spec.spacing, "phantom");

  LabelMap labels(spec.grid_size, spec.spacing);
  Volume vol(4, spec.grid_size, spec.spacing);
  const auto& g = spec.grid_size;
  for (std::int64_t z = 0; z < g[2]; ++z)
    for (std::int64_t y = 0; y < g[1]; ++y)
      for (std::int64_t x = 0; x < g[0]; ++x) {
        const double dx = x - spec.center[0], dy = y - spec.center[1], dz = z - spec.center[2];
        const double d = std::sqrt(dx * dx + dy * dy + dz * dz);
        std::uint8_t l = kBackground;
        if (d <= r[2])
          l = kEnhancing;
        else if (d <= r[1])
          l = kNecrotic;
        else if (d <= r[0])
          l = kEdema;
        labels.at(x, y, z) = l;
      }

  std::mt19937_64 rng(spec.seed);
  std::normal_distribution<float> noise(0.f, 1.f);
  for (std::int64_t c = 0; c < 4; ++c) {
    auto ch = vol.channel(c);
    for (std::int64_t i = 0; i < vol.voxels(); ++i) {
      const int cls = label_to_class(labels.data[static_cast<std::size_t>(i)]);
      float v = kPhantomMeans[cls][c];
      if (spec.noise_sigma > 0.f) v += spec.noise_sigma * noise(rng);
      ch[i] = v;
    }
  }
  return {std::move(vol), std::move(labels)};
}

std::vector<PhantomSpec> phantom_series(int count, Dims3 grid, std::uint64_t seed, float noise_sigma) {
  if (count < 1) throw SpecError("phantom count must be positive");
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<float> unit(0.f, 1.f);
  const float scale = static_cast<float>(*std::min_element(grid.begin(), grid.end())) / 32.f;
  std::vector<PhantomSpec> specs;
  for (int i = 0; i < count; ++i) {
    PhantomSpec s;
    s.grid_size = grid;
    s.noise_sigma = noise_sigma;
    s.seed = seed * 1000003 + static_cast<std::uint64_t>(i);
    s.radii = {scale * (8.f + 3.f * unit(rng)), scale * (4.5f + 2.f * unit(rng)), scale * (2.f + 1.5f * unit(rng))};
    for (int a = 0; a < 3; ++a) {
      const float mid = static_cast<float>(grid[a] - 1) / 2.f;
      const float room = std::max(0.f, mid - s.radii[0]);
      s.center[a] = mid + std::min(room, 2.f * scale) * (2.f * unit(rng) - 1.f);
    }
    specs.push_back(s);
  }
  return specs;
}

// ---------------------------------------------------------------------------
// VSG1 I/O

void write_volume(const Volume& v, const std::filesystem::path& path) {
  v.validate();
  detail::ByteWriter w;
  w.reserve(vsg1_header_size(4) + sizeof(float) * static_cast<std::size_t>(v.data.size()));
  write_header(w,
               {static_cast<std::uint64_t>(v.channels), static_cast<std::uint64_t>(v.dims[0]),
                static_cast<std::uint64_t>(v.dims[1]), static_cast<std::uint64_t>(v.dims[2])},
               v.spacing, kDtypeF32);
  for (Eigen::Index i = 0; i < v.data.size(); ++i) w.put(v.data[i]);
  write_file_atomic(path, w.str());
}

Volume read_volume(const std::filesystem::path& path) {
  const std::string what = path.string();
  const std::string bytes = detail::read_file_bytes(what);
  detail::ByteReader r(bytes, what);
  Header h = read_header(r, what);
  if (h.dims.size() != 4) throw FormatError(what + ": volume files need 4 dims (channel, x, y, z)");
  if (h.dtype != kDtypeF32) throw FormatError(what + ": volume payload must be f32");
  Volume v(static_cast<std::int64_t>(h.dims[0]),
           {static_cast<std::int64_t>(h.dims[1]), static_cast<std::int64_t>(h.dims[2]),
            static_cast<std::int64_t>(h.dims[3])},
           h.spacing);
  const std::size_t n = static_cast<std::size_t>(v.data.size());
  if (r.remaining() < n * sizeof(float)) throw CorruptFileError(what + ": truncated payload");
  if (r.remaining() > n * sizeof(float)) throw CorruptFileError(what + ": trailing bytes after payload");
  for (std::size_t i = 0; i < n; ++i) v.data[static_cast<Eigen::Index>(i)] = r.get<float>();
  v.validate();
  return v;
}

void write_label_map(const LabelMap& m, const std::filesystem::path& path) {
  m.validate();
  detail::ByteWriter w;
  w.reserve(vsg1_header_size(3) + m.data.size());
  write_header(w,
               {static_cast<std::uint64_t>(m.dims[0]), static_cast<std::uint64_t>(m.dims[1]),
                static_cast<std::uint64_t>(m.dims[2])},
               m.spacing, kDtypeU8);
  w.put_bytes(std::string_view(reinterpret_cast<const char*>(m.data.data()), m.data.size()));
  write_file_atomic(path, w.str());
}

LabelMap read_label_map(const std::filesystem::path& path) {
  const std::string what = path.string();
  const std::string bytes = detail::read_file_bytes(what);
  detail::ByteReader r(bytes, what);
  Header h = read_header(r, what);
  if (h.dims.size() != 3) throw FormatError(what + ": label map files need 3 dims (x, y, z)");
  if (h.dtype != kDtypeU8) throw FormatError(what + ": label map payload must be u8");
  LabelMap m({static_cast<std::int64_t>(h.dims[0]), static_cast<std::int64_t>(h.dims[1]),
              static_cast<std::int64_t>(h.dims[2])},
             h.spacing);
  if (r.remaining() < m.data.size()) throw CorruptFileError(what + ": truncated payload");
  if (r.remaining() > m.data.size()) throw CorruptFileError(what + ": trailing bytes after payload");
  auto payload = r.get_bytes(m.data.size());
  std::memcpy(m.data.data(), payload.data(), payload.size());
  m.validate();
  return m;
}

}  // namespace vsg

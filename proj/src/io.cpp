// SPDX-License-Identifier: Apache-2.0
#include "voxseg/io.hpp"

#include <algorithm>
#include <bit>
#include <cstring>
#include <fstream>
#include <vector>

#include <fmt/format.h>
#include <zlib.h>

#include "voxseg/error.hpp"

namespace voxseg {

namespace fs = std::filesystem;

namespace {

constexpr char kV3dMagic[4] = {'V', '3', 'D', '1'};

template <typename T>
T byteswap_value(T v) {
  auto* p = reinterpret_cast<unsigned char*>(&v);
  std::reverse(p, p + sizeof(T));
  return v;
}

template <typename T>
T to_little(T v) {
  if constexpr (std::endian::native == std::endian::little) return v;
  return byteswap_value(v);
}

void swap_payload(void* data, size_t count, size_t width) {
  auto* p = static_cast<unsigned char*>(data);
  for (size_t i = 0; i < count; ++i) std::reverse(p + i * width, p + (i + 1) * width);
}

bool ends_with(const std::string& s, const std::string& suffix) {
  return s.size() >= suffix.size() && s.compare(s.size() - suffix.size(), suffix.size(), suffix) == 0;
}

bool is_nifti(const fs::path& p) {
  auto name = p.filename().string();
  return ends_with(name, ".nii") || ends_with(name, ".nii.gz");
}

// Serialized byte view of a contiguous tensor in little-endian order.
std::vector<char> payload_bytes(const torch::Tensor& t) {
  auto c = t.contiguous();
  std::vector<char> bytes(c.numel() * c.element_size());
  std::memcpy(bytes.data(), c.data_ptr(), bytes.size());
  if constexpr (std::endian::native != std::endian::little) swap_payload(bytes.data(), c.numel(), c.element_size());
  return bytes;
}

// NIfTI-1 header, 348 bytes, field order per the published layout.
#pragma pack(push, 1)
struct NiftiHeader {
  int32_t sizeof_hdr;
  char data_type[10];
  char db_name[18];
  int32_t extents;
  int16_t session_error;
  char regular;
  char dim_info;
  int16_t dim[8];
  float intent_p1, intent_p2, intent_p3;
  int16_t intent_code;
  int16_t datatype;
  int16_t bitpix;
  int16_t slice_start;
  float pixdim[8];
  float vox_offset;
  float scl_slope;
  float scl_inter;
  int16_t slice_end;
  char slice_code;
  char xyzt_units;
  float cal_max, cal_min;
  float slice_duration;
  float toffset;
  int32_t glmax, glmin;
  char descrip[80];
  char aux_file[24];
  int16_t qform_code;
  int16_t sform_code;
  float quatern_b, quatern_c, quatern_d;
  float qoffset_x, qoffset_y, qoffset_z;
  float srow_x[4];
  float srow_y[4];
  float srow_z[4];
  char intent_name[16];
  char magic[4];
};
#pragma pack(pop)
static_assert(sizeof(NiftiHeader) == 348);

constexpr int16_t kNiftiUint8 = 2;
constexpr int16_t kNiftiInt16 = 4;
constexpr int16_t kNiftiInt32 = 8;
constexpr int16_t kNiftiFloat32 = 16;
constexpr int16_t kNiftiFloat64 = 64;

void swap_header(NiftiHeader& h) {
  h.sizeof_hdr = byteswap_value(h.sizeof_hdr);
  for (auto& d : h.dim) d = byteswap_value(d);
  h.datatype = byteswap_value(h.datatype);
  h.bitpix = byteswap_value(h.bitpix);
  for (auto& p : h.pixdim) p = byteswap_value(p);
  h.vox_offset = byteswap_value(h.vox_offset);
  h.scl_slope = byteswap_value(h.scl_slope);
  h.scl_inter = byteswap_value(h.scl_inter);
}

struct GzFile {
  gzFile handle;
  explicit GzFile(const fs::path& path, const char* mode) : handle(gzopen(path.c_str(), mode)) {
    if (!handle) throw IoError(fmt::format("cannot open '{}'", path.string()));
  }
  ~GzFile() {
    if (handle) gzclose(handle);
  }
  GzFile(const GzFile&) = delete;
  GzFile& operator=(const GzFile&) = delete;

  void read_exact(void* dst, size_t n, const fs::path& path) {
    auto* out = static_cast<char*>(dst);
    while (n > 0) {
      unsigned chunk = static_cast<unsigned>(std::min<size_t>(n, 1u << 30));
      int got = gzread(handle, out, chunk);
      if (got <= 0) throw IoError(fmt::format("'{}': truncated NIfTI file", path.string()));
      out += got;
      n -= static_cast<size_t>(got);
    }
  }
  void write_exact(const void* src, size_t n, const fs::path& path) {
    auto* in = static_cast<const char*>(src);
    while (n > 0) {
      unsigned chunk = static_cast<unsigned>(std::min<size_t>(n, 1u << 30));
      int put = gzwrite(handle, in, chunk);
      if (put <= 0) throw IoError(fmt::format("'{}': write failed", path.string()));
      in += put;
      n -= static_cast<size_t>(put);
    }
  }
};

}  // namespace

std::string volume_stem(const fs::path& path) {
  auto name = path.filename().string();
  for (const char* ext : {".nii.gz", ".nii", ".v3d"})
    if (ends_with(name, ext)) return name.substr(0, name.size() - std::strlen(ext));
  return path.stem().string();
}

RawVolume read_v3d(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError(fmt::format("cannot open '{}'", path.string()));
  char magic[4];
  uint8_t dtype = 0;
  uint32_t rank = 0;
  in.read(magic, 4);
  in.read(reinterpret_cast<char*>(&dtype), 1);
  in.read(reinterpret_cast<char*>(&rank), 4);
  if (!in || std::memcmp(magic, kV3dMagic, 4) != 0) throw IoError(fmt::format("'{}' is not a V3D1 file", path.string()));
  rank = to_little(rank);
  if (rank == 0 || rank > 8) throw IoError(fmt::format("'{}': unsupported rank {}", path.string(), rank));
  std::vector<int64_t> dims(rank);
  for (auto& d : dims) {
    uint32_t v = 0;
    in.read(reinterpret_cast<char*>(&v), 4);
    d = to_little(v);
  }
  float sp[3];
  in.read(reinterpret_cast<char*>(sp), sizeof(sp));
  if (!in) throw IoError(fmt::format("'{}': truncated header", path.string()));
  for (auto& s : sp) s = to_little(s);

  torch::ScalarType type;
  if (dtype == 0)
    type = torch::kFloat32;
  else if (dtype == 1)
    type = torch::kUInt8;
  else
    throw IoError(fmt::format("'{}': unknown dtype code {}", path.string(), dtype));

  auto data = torch::empty(dims, torch::TensorOptions().dtype(type));
  const auto nbytes = static_cast<std::streamsize>(data.numel() * data.element_size());
  in.read(static_cast<char*>(data.data_ptr()), nbytes);
  if (in.gcount() != nbytes) throw IoError(fmt::format("'{}': truncated payload", path.string()));
  if constexpr (std::endian::native != std::endian::little) swap_payload(data.data_ptr(), data.numel(), data.element_size());
  return {data, {sp[0], sp[1], sp[2]}};
}

void write_v3d(const fs::path& path, const torch::Tensor& data, const Spacing& spacing) {
  uint8_t dtype;
  if (data.scalar_type() == torch::kFloat32)
    dtype = 0;
  else if (data.scalar_type() == torch::kUInt8)
    dtype = 1;
  else
    throw ValidationError("V3D1 stores float32 or uint8 tensors only");

  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError(fmt::format("cannot write '{}'", path.string()));
  out.write(kV3dMagic, 4);
  out.write(reinterpret_cast<const char*>(&dtype), 1);
  uint32_t rank = to_little(static_cast<uint32_t>(data.dim()));
  out.write(reinterpret_cast<const char*>(&rank), 4);
  for (auto d : data.sizes()) {
    uint32_t v = to_little(static_cast<uint32_t>(d));
    out.write(reinterpret_cast<const char*>(&v), 4);
  }
  float sp[3] = {to_little(spacing.d), to_little(spacing.h), to_little(spacing.w)};
  out.write(reinterpret_cast<const char*>(sp), sizeof(sp));
  auto bytes = payload_bytes(data);
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw IoError(fmt::format("write to '{}' failed", path.string()));
}

RawVolume read_nifti(const fs::path& path, VolumeKind kind) {
  GzFile f(path, "rb");
  NiftiHeader h{};
  f.read_exact(&h, sizeof(h), path);
  bool swapped = false;
  if (h.sizeof_hdr != 348) {
    swap_header(h);
    swapped = true;
    if (h.sizeof_hdr != 348) throw IoError(fmt::format("'{}' is not a NIfTI-1 file", path.string()));
  }
  if (std::memcmp(h.magic, "n+1", 4) != 0)
    throw IoError(fmt::format("'{}': only single-file NIfTI-1 (n+1) is supported", path.string()));

  const int rank = h.dim[0];
  if (rank < 3 || rank > 7) throw IoError(fmt::format("'{}': unsupported NIfTI rank {}", path.string(), rank));
  const int64_t nx = h.dim[1], ny = h.dim[2], nz = h.dim[3];
  int64_t nt = 1;
  for (int i = 4; i <= rank; ++i) nt *= std::max<int16_t>(h.dim[i], 1);

  if (kind == VolumeKind::Image && nt != kNumModalities)
    throw ValidationError(fmt::format("'{}': image needs 4 channels, got {}", path.string(), nt));
  if (kind == VolumeKind::Label && nt != 1)
    throw ValidationError(fmt::format("'{}': label volume must be 3D, got {} channels", path.string(), nt));

  torch::ScalarType type;
  switch (h.datatype) {
    case kNiftiUint8: type = torch::kUInt8; break;
    case kNiftiInt16: type = torch::kInt16; break;
    case kNiftiInt32: type = torch::kInt32; break;
    case kNiftiFloat32: type = torch::kFloat32; break;
    case kNiftiFloat64: type = torch::kFloat64; break;
    default: throw IoError(fmt::format("'{}': unsupported NIfTI datatype {}", path.string(), h.datatype));
  }

  // Skip extensions up to vox_offset.
  const auto offset = static_cast<size_t>(h.vox_offset);
  if (offset > sizeof(h)) {
    std::vector<char> skip(offset - sizeof(h));
    f.read_exact(skip.data(), skip.size(), path);
  }

  auto raw = torch::empty({nt, nz, ny, nx}, torch::TensorOptions().dtype(type));
  f.read_exact(raw.data_ptr(), raw.numel() * raw.element_size(), path);
  if (swapped) swap_payload(raw.data_ptr(), raw.numel(), raw.element_size());

  // (t, z, y, x) -> (t, x, y, z) so that D = x, H = y, W = z.
  auto data = raw.permute({0, 3, 2, 1}).contiguous();
  if (h.scl_slope != 0.0f && (h.scl_slope != 1.0f || h.scl_inter != 0.0f))
    data = data.to(torch::kFloat64) * h.scl_slope + h.scl_inter;
  if (kind == VolumeKind::Label) data = data.squeeze(0);

  Spacing sp{h.pixdim[1] > 0 ? h.pixdim[1] : 1.0f, h.pixdim[2] > 0 ? h.pixdim[2] : 1.0f,
             h.pixdim[3] > 0 ? h.pixdim[3] : 1.0f};
  return {data, sp};
}

void write_nifti(const fs::path& path, const torch::Tensor& data, const Spacing& spacing, VolumeKind kind) {
  torch::Tensor t = kind == VolumeKind::Label ? data.unsqueeze(0) : data;
  if (t.dim() != 4) throw ValidationError("NIfTI writer expects (C,D,H,W) or (D,H,W)");

  NiftiHeader h{};
  h.sizeof_hdr = 348;
  h.regular = 'r';
  h.dim[0] = kind == VolumeKind::Label ? 3 : 4;
  h.dim[1] = static_cast<int16_t>(t.size(1));
  h.dim[2] = static_cast<int16_t>(t.size(2));
  h.dim[3] = static_cast<int16_t>(t.size(3));
  h.dim[4] = static_cast<int16_t>(t.size(0));
  for (int i = 5; i < 8; ++i) h.dim[i] = 1;
  if (kind == VolumeKind::Label) {
    h.datatype = kNiftiUint8;
    h.bitpix = 8;
  } else {
    h.datatype = kNiftiFloat32;
    h.bitpix = 32;
  }
  h.pixdim[0] = 1.0f;
  h.pixdim[1] = spacing.d;
  h.pixdim[2] = spacing.h;
  h.pixdim[3] = spacing.w;
  h.pixdim[4] = 1.0f;
  h.vox_offset = 352.0f;
  h.scl_slope = 1.0f;
  h.xyzt_units = 2;  // mm
  h.sform_code = 1;
  h.srow_x[0] = spacing.d;
  h.srow_y[1] = spacing.h;
  h.srow_z[2] = spacing.w;
  std::memcpy(h.magic, "n+1", 4);

  auto typed = kind == VolumeKind::Label ? t.to(torch::kUInt8) : t.to(torch::kFloat32);
  auto payload = typed.permute({0, 3, 2, 1}).contiguous();  // (t, z, y, x)

  auto name = path.filename().string();
  GzFile f(path, ends_with(name, ".gz") ? "wb6" : "wbT");
  f.write_exact(&h, sizeof(h), path);
  const char ext[4] = {0, 0, 0, 0};
  f.write_exact(ext, 4, path);
  f.write_exact(payload.data_ptr(), payload.numel() * payload.element_size(), path);
}

MultiModalVolume load_image(const fs::path& path) {
  auto raw = is_nifti(path) ? read_nifti(path, VolumeKind::Image) : read_v3d(path);
  if (raw.data.dim() == 4 && raw.data.size(0) != kNumModalities)
    throw ValidationError(fmt::format("'{}': image needs 4 channels, got {}", path.string(), raw.data.size(0)));
  return MultiModalVolume(raw.data.to(torch::kFloat32), raw.spacing, volume_stem(path));
}

LabelVolume load_labels(const fs::path& path) {
  auto raw = is_nifti(path) ? read_nifti(path, VolumeKind::Label) : read_v3d(path);
  return LabelVolume(raw.data, raw.spacing);
}

ProbabilityVolume load_probabilities(const fs::path& path) {
  auto raw = read_v3d(path);
  return ProbabilityVolume(raw.data, raw.spacing);
}

void save_image(const MultiModalVolume& vol, const fs::path& path) {
  if (is_nifti(path))
    write_nifti(path, vol.data(), vol.spacing(), VolumeKind::Image);
  else
    write_v3d(path, vol.data(), vol.spacing());
}

void save_label_volume(const LabelVolume& vol, const fs::path& path) {
  if (is_nifti(path))
    write_nifti(path, vol.data(), vol.spacing(), VolumeKind::Label);
  else
    write_v3d(path, vol.data(), vol.spacing());
}

void save_probabilities(const ProbabilityVolume& vol, const fs::path& path) { write_v3d(path, vol.data(), vol.spacing()); }

}  // namespace voxseg

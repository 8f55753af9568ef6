#include "lovis/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <iterator>
#include <map>
#include <vector>

#include "lovis/errors.hpp"

namespace lovis {

static_assert(std::endian::native == std::endian::little, "checkpoint I/O assumes a little-endian host");

namespace {

constexpr char kMagic[4] = {'L', 'O', 'V', 'S'};

template <typename T>
void put(std::vector<char>& buf, T value) {
  const char* p = reinterpret_cast<const char*>(&value);
  buf.insert(buf.end(), p, p + sizeof(T));
}

class Reader {
 public:
  Reader(const std::vector<char>& buf, std::string path) : buf_(buf), path_(std::move(path)) {}

  template <typename T>
  T get() {
    need(sizeof(T));
    T value;
    std::memcpy(&value, buf_.data() + pos_, sizeof(T));
    pos_ += sizeof(T);
    return value;
  }

  std::string bytes(std::size_t n) {
    need(n);
    std::string s(buf_.data() + pos_, n);
    pos_ += n;
    return s;
  }

  void doubles(std::vector<double>& out, std::size_t n) {
    need(n * sizeof(double));
    out.resize(n);
    std::memcpy(out.data(), buf_.data() + pos_, n * sizeof(double));
    pos_ += n * sizeof(double);
  }

  bool done() const { return pos_ == buf_.size(); }

 private:
  void need(std::size_t n) const {
    if (buf_.size() - pos_ < n) throw FormatError("checkpoint " + path_ + ": truncated file");
  }

  const std::vector<char>& buf_;
  std::string path_;
  std::size_t pos_ = 0;
};

}  // namespace

void save_checkpoint(const ParameterSet& params, const std::filesystem::path& path) {
  std::vector<char> buf;
  buf.insert(buf.end(), kMagic, kMagic + 4);
  put<std::uint32_t>(buf, kCheckpointVersion);
  put<std::uint32_t>(buf, static_cast<std::uint32_t>(params.size()));
  for (const auto& [name, t] : params.entries()) {
    put<std::uint32_t>(buf, static_cast<std::uint32_t>(name.size()));
    buf.insert(buf.end(), name.begin(), name.end());
    put<std::uint32_t>(buf, static_cast<std::uint32_t>(t.rank()));
    for (std::size_t d : t.shape()) put<std::uint64_t>(buf, d);
    const auto data = t.data();
    const char* p = reinterpret_cast<const char*>(data.data());
    buf.insert(buf.end(), p, p + data.size() * sizeof(double));
  }
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw FormatError("cannot open " + path.string() + " for writing");
  out.write(buf.data(), static_cast<std::streamsize>(buf.size()));
  if (!out) throw FormatError("failed writing " + path.string());
}

void load_checkpoint(ParameterSet& params, const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError("cannot open checkpoint " + path.string());
  const std::vector<char> buf((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  Reader r(buf, path.string());

  if (r.bytes(4) != std::string(kMagic, 4)) throw FormatError("checkpoint " + path.string() + ": bad magic");
  const auto version = r.get<std::uint32_t>();
  if (version != kCheckpointVersion) {
    throw FormatError("checkpoint " + path.string() + ": unsupported version " + std::to_string(version));
  }
  const auto count = r.get<std::uint32_t>();

  std::map<std::string, std::pair<Shape, std::vector<double>>> records;
  for (std::uint32_t i = 0; i < count; ++i) {
    const auto name_len = r.get<std::uint32_t>();
    std::string name = r.bytes(name_len);
    const auto rank = r.get<std::uint32_t>();
    if (rank > 8) throw FormatError("checkpoint " + path.string() + ": implausible rank for '" + name + "'");
    Shape shape(rank);
    for (auto& d : shape) d = static_cast<std::size_t>(r.get<std::uint64_t>());
    std::vector<double> values;
    r.doubles(values, shape_numel(shape));
    records[name] = {std::move(shape), std::move(values)};
  }
  if (!r.done()) throw FormatError("checkpoint " + path.string() + ": trailing bytes");

  for (const auto& [name, rec] : records) {
    if (!params.contains(name)) throw FormatError("checkpoint " + path.string() + ": unknown parameter '" + name + "'");
    const Tensor& t = params.get(name);
    if (t.shape() != rec.first) {
      throw DimensionError("checkpoint " + path.string() + ": parameter '" + name + "' has shape " +
                           shape_str(rec.first) + " but the model expects " + shape_str(t.shape()));
    }
  }
  for (const auto& [name, t] : params.entries()) {
    if (!records.count(name)) throw FormatError("checkpoint " + path.string() + ": missing parameter '" + name + "'");
  }
  for (auto& [name, rec] : records) {
    auto dst = params.get(name).data_mut();
    std::copy(rec.second.begin(), rec.second.end(), dst.begin());
  }
}

std::uint64_t parameter_hash(const ParameterSet& params) {
  std::uint64_t h = 1469598103934665603ULL;
  auto mix = [&h](const void* p, std::size_t n) {
    const auto* b = static_cast<const unsigned char*>(p);
    for (std::size_t i = 0; i < n; ++i) {
      h ^= b[i];
      h *= 1099511628211ULL;
    }
  };
  for (const auto& [name, t] : params.entries()) {
    mix(name.data(), name.size());
    for (std::size_t d : t.shape()) mix(&d, sizeof(d));
    mix(t.data().data(), t.numel() * sizeof(double));
  }
  return h;
}

}  // namespace lovis

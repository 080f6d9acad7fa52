#include "afem/io.hpp"

#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <sstream>

#include <fmt/format.h>

#include "afem/errors.hpp"

namespace afem::io {

namespace {

class Writer {
 public:
  void bytes(std::string_view s) { out_.append(s); }
  void u32(std::uint32_t v) { little_endian(v); }
  void u64(std::uint64_t v) { little_endian(v); }
  void f64(double v) { little_endian(std::bit_cast<std::uint64_t>(v)); }
  void f64s(std::span<const double> vs) {
    for (double v : vs) f64(v);
  }
  void json(const nlohmann::json& j) {
    const std::string s = j.dump();
    u32(static_cast<std::uint32_t>(s.size()));
    bytes(s);
  }
  std::string take() { return std::move(out_); }

 private:
  template <typename T>
  void little_endian(T v) {
    for (std::size_t i = 0; i < sizeof(T); ++i) out_.push_back(static_cast<char>((v >> (8 * i)) & 0xFF));
  }
  std::string out_;
};

class Reader {
 public:
  explicit Reader(const std::string& in) : in_(in) {}

  std::size_t offset() const noexcept { return pos_; }
  bool done() const noexcept { return pos_ == in_.size(); }

  std::string_view bytes(std::size_t n, std::string_view what) {
    need(n, what);
    std::string_view s(in_.data() + pos_, n);
    pos_ += n;
    return s;
  }
  std::uint32_t u32(std::string_view what) { return little_endian<std::uint32_t>(what); }
  std::uint64_t u64(std::string_view what) { return little_endian<std::uint64_t>(what); }
  double f64(std::string_view what) { return std::bit_cast<double>(u64(what)); }
  std::vector<double> f64s(std::size_t n, std::string_view what) {
    need(8 * n, what);
    std::vector<double> out(n);
    for (double& v : out) v = f64(what);
    return out;
  }
  nlohmann::json json(std::string_view what) {
    const std::size_t at = pos_;
    const std::uint32_t len = u32(what);
    const std::string_view text = bytes(len, what);
    try {
      return nlohmann::json::parse(text);
    } catch (const nlohmann::json::exception& e) {
      throw ParseError(fmt::format("invalid JSON in {} at offset {}: {}", what, at, e.what()), at);
    }
  }

  [[noreturn]] void fail(const std::string& msg, std::size_t at) const {
    throw ParseError(fmt::format("{} (offset {})", msg, at), at);
  }

 private:
  void need(std::size_t n, std::string_view what) const {
    if (in_.size() - pos_ < n) {
      fail(fmt::format("truncated file: {} needs {} bytes, {} left", what, n, in_.size() - pos_), pos_);
    }
  }
  template <typename T>
  T little_endian(std::string_view what) {
    need(sizeof(T), what);
    T v = 0;
    for (std::size_t i = 0; i < sizeof(T); ++i) {
      v |= static_cast<T>(static_cast<unsigned char>(in_[pos_ + i])) << (8 * i);
    }
    pos_ += sizeof(T);
    return v;
  }

  const std::string& in_;
  std::size_t pos_ = 0;
};

void check_magic(Reader& r, std::string_view magic) {
  const std::size_t at = r.offset();
  if (r.bytes(4, "magic") != magic) r.fail(fmt::format("bad magic, expected \"{}\"", magic), at);
}

}  // namespace

// ---------------------------------------------------------------------------
// Dataset

std::string encode_dataset(const pipeline::Dataset& data) {
  const pipeline::GenConfig& c = data.config;
  Writer w;
  w.bytes("AFEM");
  w.u32(kDatasetVersion);
  w.u32(static_cast<std::uint32_t>(data.mesh->nx()));
  w.u32(static_cast<std::uint32_t>(data.mesh->ny()));
  w.u32(static_cast<std::uint32_t>(data.train.size()));
  w.u32(static_cast<std::uint32_t>(data.test.size()));
  nlohmann::json echo = c.to_json();
  echo["n_train"] = data.train.size();
  echo["n_test"] = data.test.size();
  w.json(echo);
  for (const auto* split : {&data.train, &data.test}) {
    for (const pipeline::Sample& s : *split) {
      w.u64(s.seed);
      w.f64s(s.kappa_exact.dofs());
      w.f64s(s.u_obs.dofs());
    }
  }
  w.f64(data.norm.mean);
  w.f64(data.norm.std);
  return w.take();
}

pipeline::Dataset decode_dataset(const std::string& bytes) {
  Reader r(bytes);
  check_magic(r, "AFEM");
  const std::size_t version_at = r.offset();
  const std::uint32_t version = r.u32("version");
  if (version != kDatasetVersion) r.fail(fmt::format("unsupported dataset version {}", version), version_at);
  const std::size_t header_at = r.offset();
  const std::uint32_t nx = r.u32("nx");
  const std::uint32_t ny = r.u32("ny");
  const std::uint32_t n_train = r.u32("n_train");
  const std::uint32_t n_test = r.u32("n_test");
  if (nx == 0 || ny == 0) r.fail("mesh resolution must be positive", header_at);

  const std::size_t json_at = r.offset();
  pipeline::Dataset data;
  try {
    data.config = pipeline::GenConfig::from_json(r.json("config"));
  } catch (const ParseError&) {
    throw;
  } catch (const std::exception& e) {
    r.fail(fmt::format("invalid generation config: {}", e.what()), json_at);
  }
  if (data.config.nx != nx || data.config.ny != ny || data.config.n_train != n_train ||
      data.config.n_test != n_test) {
    r.fail("config echo disagrees with header counts", json_at);
  }

  data.mesh = build_unit_square_mesh(nx, ny);
  const std::size_t n = data.mesh->num_vertices();
  const std::size_t records_at = r.offset();
  const std::size_t record_bytes = 8 + 16 * n;
  if ((bytes.size() - records_at) != (std::size_t{n_train} + n_test) * record_bytes + 16) {
    if (bytes.size() - records_at < (std::size_t{n_train} + n_test) * record_bytes + 16) {
      r.fail(fmt::format("truncated file: {} records of {} bytes declared", n_train + n_test, record_bytes),
             bytes.size());
    }
    r.fail("trailing bytes after normalization statistics", records_at + (n_train + n_test) * record_bytes + 16);
  }
  auto read_split = [&](std::size_t count, std::vector<pipeline::Sample>& out) {
    out.reserve(count);
    for (std::size_t i = 0; i < count; ++i) {
      const std::size_t at = r.offset();
      const std::uint64_t seed = r.u64("sample seed");
      auto kappa = r.f64s(n, "kappa");
      auto u = r.f64s(n, "u_obs");
      try {
        out.push_back({FeFunction(data.mesh, std::move(kappa)), FeFunction(data.mesh, std::move(u)), seed});
      } catch (const std::exception& e) {
        r.fail(fmt::format("invalid sample record: {}", e.what()), at);
      }
    }
  };
  read_split(n_train, data.train);
  read_split(n_test, data.test);
  data.norm.mean = r.f64("normalization mean");
  data.norm.std = r.f64("normalization std");
  return data;
}

// ---------------------------------------------------------------------------
// Checkpoint

std::string encode_checkpoint(const Checkpoint& ckpt) {
  const pipeline::TrainState& s = ckpt.state;
  Writer w;
  w.bytes("AFCK");
  w.u32(kCheckpointVersion);
  w.json({{"model", ckpt.model.to_json()},
          {"train", ckpt.train_config},
          {"epoch", s.epoch},
          {"loss_history", s.loss_history}});
  w.u64(s.adam.step);
  w.u64(s.params.seed());
  const std::size_t p = s.params.count();
  w.u64(p);
  w.f64s(s.params.flatten());
  for (const auto* moments : {&s.adam.m, &s.adam.v}) {
    for (const Tensor& t : *moments) w.f64s(t.data());
  }
  return w.take();
}

Checkpoint decode_checkpoint(const std::string& bytes) {
  Reader r(bytes);
  check_magic(r, "AFCK");
  const std::size_t version_at = r.offset();
  const std::uint32_t version = r.u32("version");
  if (version != kCheckpointVersion) {
    r.fail(fmt::format("checkpoint version {} is not supported (expected {})", version, kCheckpointVersion),
           version_at);
  }
  const std::size_t json_at = r.offset();
  const nlohmann::json meta = r.json("checkpoint metadata");
  Checkpoint ckpt;
  try {
    ckpt.model = nn::ModelConfig::from_json(meta.at("model"));
    ckpt.train_config = meta.at("train");
    ckpt.state.epoch = meta.at("epoch").get<std::size_t>();
    ckpt.state.loss_history = meta.at("loss_history").get<std::vector<double>>();
  } catch (const std::exception& e) {
    r.fail(fmt::format("invalid checkpoint metadata: {}", e.what()), json_at);
  }
  const std::uint64_t step = r.u64("adam step");
  const std::uint64_t seed = r.u64("rng seed");
  const std::size_t count_at = r.offset();
  const std::uint64_t p = r.u64("parameter count");

  ckpt.state.params = nn::init_params(ckpt.model, seed);
  if (p != ckpt.state.params.count()) {
    r.fail(fmt::format("checkpoint holds {} parameters, config implies {}", p, ckpt.state.params.count()),
           count_at);
  }
  ckpt.state.params.unflatten(r.f64s(p, "parameters"));
  const auto values = ckpt.state.params.values();
  ckpt.state.adam = nn::AdamState::zeros_like(values);
  ckpt.state.adam.step = step;
  for (auto* moments : {&ckpt.state.adam.m, &ckpt.state.adam.v}) {
    for (Tensor& t : *moments) {
      const auto flat = r.f64s(t.size(), "adam moments");
      std::copy(flat.begin(), flat.end(), t.data().begin());
    }
  }
  if (!r.done()) r.fail("trailing bytes after checkpoint payload", r.offset());
  return ckpt;
}

// ---------------------------------------------------------------------------
// Files

std::string read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError(fmt::format("cannot open '{}' for reading", path.string()));
  std::ostringstream ss;
  ss << in.rdbuf();
  if (in.bad()) throw IoError(fmt::format("read error on '{}'", path.string()));
  return std::move(ss).str();
}

void write_file_atomic(const std::filesystem::path& path, const std::string& bytes) {
  std::filesystem::path tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError(fmt::format("cannot open '{}' for writing", tmp.string()));
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    out.flush();
    if (!out) throw IoError(fmt::format("write error on '{}'", tmp.string()));
  }
  std::error_code ec;
  std::filesystem::rename(tmp, path, ec);
  if (ec) {
    std::filesystem::remove(tmp);
    throw IoError(fmt::format("cannot move '{}' into place: {}", path.string(), ec.message()));
  }
}

namespace {
bool all_finite(const nlohmann::json& j) {
  if (j.is_number_float()) return std::isfinite(j.get<double>());
  if (j.is_structured()) {
    for (const auto& v : j) {
      if (!all_finite(v)) return false;
    }
  }
  return true;
}
}  // namespace

void write_report(const std::filesystem::path& path, const nlohmann::json& report) {
  if (!all_finite(report)) throw IoError("report contains non-finite numbers");
  write_file_atomic(path, report.dump(2) + "\n");
}

}  // namespace afem::io

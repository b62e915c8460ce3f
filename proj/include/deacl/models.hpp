#pragma once

// Encoder, projector head and linear classifier, their parameter containers,
// and the binary checkpoint format.
//
// Checkpoint layout (all integers little-endian):
//   "DACL" | u32 version | u32 metadata length | metadata (UTF-8 JSON)
//   then per parameter: u32 name length | name | u32 rank | u32 dims[rank] | f32 payload

#include <array>
#include <bit>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include <nlohmann/json.hpp>

#include "hash.hpp"
#include "rng.hpp"
#include "tensor.hpp"

namespace deacl {
inline namespace DEACL_PRECISION_NS {

class IoError : public Error {
 public:
  using Error::Error;
};

class ConfigError : public Error {
 public:
  using Error::Error;
};

// ---------------------------------------------------------------------------
// Named parameter collection

struct Param {
  std::string name;
  Tensor tensor;
  bool trainable = true;  // false for normalization running statistics
};

/// Ordered name -> tensor map. Copies are deep; moves are cheap.
class ParamSet {
 public:
  ParamSet() = default;
  ParamSet(const ParamSet& other) { *this = other; }
  ParamSet& operator=(const ParamSet& other) {
    if (this == &other) return *this;
    entries_.clear();
    for (const auto& p : other.entries_)
      entries_.push_back({p.name, Tensor(p.tensor.shape(), {p.tensor.values().begin(), p.tensor.values().end()},
                                         p.tensor.requires_grad()),
                          p.trainable});
    return *this;
  }
  ParamSet(ParamSet&&) noexcept = default;
  ParamSet& operator=(ParamSet&&) noexcept = default;

  std::size_t add(std::string name, Tensor t, bool trainable) {
    if (find(name)) throw ConfigError("duplicate parameter name " + name);
    t.set_requires_grad(trainable);
    entries_.push_back({std::move(name), std::move(t), trainable});
    return entries_.size() - 1;
  }

  const Param* find(std::string_view name) const {
    for (const auto& p : entries_)
      if (p.name == name) return &p;
    return nullptr;
  }

  Tensor& at(std::string_view name) {
    for (auto& p : entries_)
      if (p.name == name) return p.tensor;
    throw ConfigError("unknown parameter " + std::string(name));
  }
  const Tensor& at(std::string_view name) const { return const_cast<ParamSet*>(this)->at(name); }

  Tensor& operator[](std::size_t i) { return entries_.at(i).tensor; }
  const Tensor& operator[](std::size_t i) const { return entries_.at(i).tensor; }

  std::vector<Param>& entries() { return entries_; }
  const std::vector<Param>& entries() const { return entries_; }
  std::size_t size() const { return entries_.size(); }

  /// Number of trainable scalars.
  std::size_t parameter_count() const {
    std::size_t n = 0;
    for (const auto& p : entries_)
      if (p.trainable) n += p.tensor.numel();
    return n;
  }

  /// Fingerprint over names, shapes and raw values (running statistics included).
  std::uint64_t hash() const {
    Hasher h;
    for (const auto& p : entries_) {
      h.text(p.name);
      for (auto d : p.tensor.shape()) h.u64(d);
      h.values(p.tensor.values());
    }
    return h.digest();
  }

  void zero_grad() {
    for (auto& p : entries_) p.tensor.zero_grad();
  }

  /// Toggle gradient tracking on the trainable entries.
  void set_requires_grad(bool on) {
    for (auto& p : entries_)
      if (p.trainable) p.tensor.set_requires_grad(on);
  }

  /// Copy values by name. Every name must exist on both sides with equal shape.
  void assign_from(const ParamSet& src) {
    if (src.size() != size())
      throw ConfigError("parameter sets differ in size: " + std::to_string(src.size()) + " vs " +
                        std::to_string(size()));
    for (const auto& p : src.entries_) {
      const Param* mine = find(p.name);
      if (!mine) throw ConfigError("unknown parameter name " + p.name);
      if (mine->tensor.shape() != p.tensor.shape()) throw ShapeError("shape mismatch for parameter " + p.name);
      auto dst = at(p.name).mutable_values();
      std::copy(p.tensor.values().begin(), p.tensor.values().end(), dst.begin());
    }
  }

  /// Entries whose name starts with prefix, with the prefix kept.
  ParamSet with_prefix(std::string_view prefix) const {
    ParamSet out;
    for (const auto& p : entries_)
      if (std::string_view(p.name).starts_with(prefix)) {
        out.entries_.push_back({p.name, Tensor(p.tensor.shape(), {p.tensor.values().begin(), p.tensor.values().end()},
                                               p.tensor.requires_grad()),
                                p.trainable});
      }
    return out;
  }

  void append(const ParamSet& other) {
    for (const auto& p : other.entries_) {
      const auto i = add(p.name, Tensor(p.tensor.shape(), {p.tensor.values().begin(), p.tensor.values().end()}),
                         p.trainable);
      (void)i;
    }
  }

 private:
  std::vector<Param> entries_;
};

namespace detail {

// Fan-in scaled uniform: U(-bound, bound), bound = gain / sqrt(fan_in).
inline Tensor uniform_init(Shape shape, std::size_t fan_in, double gain, Rng& rng) {
  const double bound = gain / std::sqrt(static_cast<double>(fan_in));
  std::vector<Real> v(shape_numel(shape));
  for (auto& x : v) x = static_cast<Real>(rng.uniform(-bound, bound));
  return Tensor(std::move(shape), std::move(v));
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Encoder

struct EncoderConfig {
  std::size_t channels = 1;
  std::size_t height = 16;
  std::size_t width = 16;
  std::vector<std::size_t> widths{8, 16, 16, 32};
  std::size_t rep_dim = 64;

  void validate() const {
    if (rep_dim < 2) throw ConfigError("encoder: representation dimension must be >= 2");
    if (widths.empty()) throw ConfigError("encoder: at least one block required");
    for (auto w : widths)
      if (w < 1) throw ConfigError("encoder: block widths must be >= 1");
    if (channels < 1 || height < 3 || width < 3) throw ConfigError("encoder: invalid input shape");
  }

  /// Blocks with odd index downsample by 2.
  static std::size_t block_stride(std::size_t block) { return block % 2 == 1 ? 2 : 1; }
};

inline void to_json(nlohmann::json& j, const EncoderConfig& c) {
  j = {{"channels", c.channels}, {"height", c.height}, {"width", c.width}, {"widths", c.widths},
       {"rep_dim", c.rep_dim}};
}

inline void from_json(const nlohmann::json& j, EncoderConfig& c) {
  c.channels = j.value("channels", c.channels);
  c.height = j.value("height", c.height);
  c.width = j.value("width", c.width);
  c.widths = j.value("widths", c.widths);
  c.rep_dim = j.value("rep_dim", c.rep_dim);
}

/// Conv blocks (conv3x3 -> batch norm -> relu), global average pool, linear to rep_dim.
class Encoder {
 public:
  Encoder(EncoderConfig cfg, Rng& rng) : cfg_(std::move(cfg)) {
    cfg_.validate();
    std::size_t in = cfg_.channels;
    for (std::size_t b = 0; b < cfg_.widths.size(); ++b) {
      const auto out = cfg_.widths[b];
      const auto p = "encoder.block" + std::to_string(b);
      Block blk;
      blk.conv = params_.add(p + ".conv.weight", detail::uniform_init({out, in, 3, 3}, in * 9, std::sqrt(6.0), rng), true);
      blk.gamma = params_.add(p + ".norm.weight", Tensor::full({out}, Real{1}), true);
      blk.beta = params_.add(p + ".norm.bias", Tensor::zeros({out}), true);
      blk.mean = params_.add(p + ".norm.running_mean", Tensor::zeros({out}), false);
      blk.var = params_.add(p + ".norm.running_var", Tensor::full({out}, Real{1}), false);
      blk.stride = EncoderConfig::block_stride(b);
      blocks_.push_back(blk);
      in = out;
    }
    fc_weight_ = params_.add("encoder.fc.weight", detail::uniform_init({in, cfg_.rep_dim}, in, 1.0, rng), true);
    fc_bias_ = params_.add("encoder.fc.bias", Tensor::zeros({cfg_.rep_dim}), true);
  }

  /// batch [B,C,H,W] -> representations [B,rep_dim]. Train mode updates the
  /// normalization running averages.
  Tensor forward(const Tensor& batch, NormMode mode) { return run(batch, mode); }

  /// Eval-mode forward; a pure function of (params, input).
  Tensor infer(const Tensor& batch) const { return run(batch, NormMode::Eval); }

  const EncoderConfig& config() const { return cfg_; }
  ParamSet& params() { return params_; }
  const ParamSet& params() const { return params_; }

 private:
  Tensor run(const Tensor& batch, NormMode mode) const {
    if (batch.rank() != 4 || batch.dim(1) != cfg_.channels || batch.dim(2) != cfg_.height ||
        batch.dim(3) != cfg_.width)
      throw ShapeError("encoder: batch shape " + shape_str(batch.shape()) + " does not match config");
    Tensor h = batch;
    for (auto& blk : blocks_) {
      NormBuffers buf{params_[blk.mean], params_[blk.var]};  // shared handles
      h = conv2d(h, params_[blk.conv], blk.stride, 1);
      h = batch_norm(h, params_[blk.gamma], params_[blk.beta], buf, mode);
      h = relu(h);
    }
    h = avgpool(h);
    return add_bias(matmul(h, params_[fc_weight_]), params_[fc_bias_]);
  }

  struct Block {
    std::size_t conv, gamma, beta, mean, var, stride;
  };
  EncoderConfig cfg_;
  ParamSet params_;
  std::vector<Block> blocks_;
  std::size_t fc_weight_ = 0, fc_bias_ = 0;
};

// ---------------------------------------------------------------------------
// Projector head

struct ProjectorConfig {
  bool enabled = true;
  std::size_t hidden = 0;  // 0 -> 2 * rep_dim
  std::size_t out = 0;     // 0 -> rep_dim

  std::size_t hidden_for(std::size_t d) const { return hidden ? hidden : 2 * d; }
  std::size_t out_for(std::size_t d) const { return out ? out : d; }
};

inline void to_json(nlohmann::json& j, const ProjectorConfig& c) {
  j = {{"enabled", c.enabled}, {"hidden", c.hidden}, {"out", c.out}};
}

inline void from_json(const nlohmann::json& j, ProjectorConfig& c) {
  c.enabled = j.value("enabled", c.enabled);
  c.hidden = j.value("hidden", c.hidden);
  c.out = j.value("out", c.out);
}

/// Linear -> relu -> linear.
class Projector {
 public:
  Projector(std::size_t rep_dim, ProjectorConfig cfg, Rng& rng) : cfg_(cfg), in_(rep_dim) {
    const auto h = cfg_.hidden_for(rep_dim), p = cfg_.out_for(rep_dim);
    w1_ = params_.add("projector.fc1.weight", detail::uniform_init({rep_dim, h}, rep_dim, std::sqrt(6.0), rng), true);
    b1_ = params_.add("projector.fc1.bias", Tensor::zeros({h}), true);
    w2_ = params_.add("projector.fc2.weight", detail::uniform_init({h, p}, h, 1.0, rng), true);
    b2_ = params_.add("projector.fc2.bias", Tensor::zeros({p}), true);
  }

  Tensor forward(const Tensor& reps) {
    if (!cfg_.enabled) throw ConfigError("projector: invoked while disabled");
    if (reps.rank() != 2 || reps.dim(1) != in_) throw ShapeError("projector: input shape mismatch");
    auto h = relu(add_bias(matmul(reps, params_[w1_]), params_[b1_]));
    return add_bias(matmul(h, params_[w2_]), params_[b2_]);
  }

  const ProjectorConfig& config() const { return cfg_; }
  std::size_t input_dim() const { return in_; }
  ParamSet& params() { return params_; }
  const ParamSet& params() const { return params_; }

 private:
  ProjectorConfig cfg_;
  std::size_t in_;
  ParamSet params_;
  std::size_t w1_ = 0, b1_ = 0, w2_ = 0, b2_ = 0;
};

// ---------------------------------------------------------------------------
// Linear classifier

class LinearClassifier {
 public:
  LinearClassifier(std::size_t rep_dim, std::size_t classes, Rng& rng) : classes_(classes) {
    if (classes < 2) throw ConfigError("classifier: need at least 2 classes");
    w_ = params_.add("classifier.weight", detail::uniform_init({rep_dim, classes}, rep_dim, 1.0, rng), true);
    b_ = params_.add("classifier.bias", Tensor::zeros({classes}), true);
  }

  /// reps [B,d] -> logits [B,K].
  Tensor forward(const Tensor& reps) const {
    if (reps.rank() != 2 || reps.dim(1) != params_[w_].dim(0)) throw ShapeError("classifier: input shape mismatch");
    return add_bias(matmul(reps, params_[w_]), params_[b_]);
  }

  std::size_t classes() const { return classes_; }
  ParamSet& params() { return params_; }
  const ParamSet& params() const { return params_; }

 private:
  std::size_t classes_;
  ParamSet params_;
  std::size_t w_ = 0, b_ = 0;
};

// ---------------------------------------------------------------------------
// Checkpoints

struct Checkpoint {
  static constexpr std::uint32_t kVersion = 1;
  static constexpr std::array<char, 4> kMagic{'D', 'A', 'C', 'L'};

  nlohmann::json metadata = nlohmann::json::object();
  ParamSet params;
};

namespace detail {

static_assert(std::endian::native == std::endian::little || std::endian::native == std::endian::big);

template <typename T>
void write_le(std::ostream& os, T v) {
  static_assert(std::is_trivially_copyable_v<T>);
  std::array<char, sizeof(T)> buf;
  std::memcpy(buf.data(), &v, sizeof(T));
  if constexpr (std::endian::native == std::endian::big) std::reverse(buf.begin(), buf.end());
  os.write(buf.data(), sizeof(T));
}

template <typename T>
T read_le(std::istream& is) {
  std::array<char, sizeof(T)> buf;
  if (!is.read(buf.data(), sizeof(T))) throw IoError("checkpoint: truncated file");
  if constexpr (std::endian::native == std::endian::big) std::reverse(buf.begin(), buf.end());
  T v;
  std::memcpy(&v, buf.data(), sizeof(T));
  return v;
}

}  // namespace detail

inline void save_checkpoint(const Checkpoint& ckpt, const std::filesystem::path& path) {
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw IoError("checkpoint: cannot open " + path.string() + " for writing");
  os.write(Checkpoint::kMagic.data(), 4);
  detail::write_le<std::uint32_t>(os, Checkpoint::kVersion);
  const auto meta = ckpt.metadata.dump();
  detail::write_le<std::uint32_t>(os, static_cast<std::uint32_t>(meta.size()));
  os.write(meta.data(), static_cast<std::streamsize>(meta.size()));
  for (const auto& p : ckpt.params.entries()) {
    detail::write_le<std::uint32_t>(os, static_cast<std::uint32_t>(p.name.size()));
    os.write(p.name.data(), static_cast<std::streamsize>(p.name.size()));
    detail::write_le<std::uint32_t>(os, static_cast<std::uint32_t>(p.tensor.rank()));
    for (auto d : p.tensor.shape()) detail::write_le<std::uint32_t>(os, static_cast<std::uint32_t>(d));
    for (Real v : p.tensor.values()) detail::write_le<float>(os, static_cast<float>(v));
  }
  if (!os) throw IoError("checkpoint: write failed for " + path.string());
}

/// Parameters whose name carries the "running_" marker are normalization statistics.
inline bool is_buffer_name(std::string_view name) { return name.find(".running_") != std::string_view::npos; }

inline Checkpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("checkpoint: cannot open " + path.string());
  std::array<char, 4> magic{};
  if (!is.read(magic.data(), 4)) throw IoError("checkpoint: truncated file");
  if (magic != Checkpoint::kMagic) throw IoError("checkpoint: bad magic in " + path.string());
  const auto version = detail::read_le<std::uint32_t>(is);
  if (version != Checkpoint::kVersion)
    throw IoError("checkpoint: unsupported version " + std::to_string(version));
  const auto meta_len = detail::read_le<std::uint32_t>(is);
  std::string meta(meta_len, '\0');
  if (!is.read(meta.data(), meta_len)) throw IoError("checkpoint: truncated metadata");
  Checkpoint ckpt;
  try {
    ckpt.metadata = nlohmann::json::parse(meta);
  } catch (const nlohmann::json::exception& e) {
    throw IoError(std::string("checkpoint: bad metadata: ") + e.what());
  }
  while (is.peek() != std::char_traits<char>::eof()) {
    const auto name_len = detail::read_le<std::uint32_t>(is);
    std::string name(name_len, '\0');
    if (!is.read(name.data(), name_len)) throw IoError("checkpoint: truncated parameter name");
    const auto rank = detail::read_le<std::uint32_t>(is);
    if (rank > 8) throw IoError("checkpoint: implausible rank for " + name);
    Shape shape(rank);
    for (auto& d : shape) d = detail::read_le<std::uint32_t>(is);
    std::vector<Real> values(shape_numel(shape));
    for (auto& v : values) v = static_cast<Real>(detail::read_le<float>(is));
    const bool trainable = !is_buffer_name(name);
    ckpt.params.add(std::move(name), Tensor(std::move(shape), std::move(values)), trainable);
  }
  return ckpt;
}

/// Loads every entry of `src` that starts with `prefix` into `dst`. Unknown,
/// missing or mis-shaped names are rejected.
inline void load_params(ParamSet& dst, const ParamSet& src, std::string_view prefix) {
  dst.assign_from(src.with_prefix(prefix));
}

inline Checkpoint make_checkpoint(const Encoder& encoder, const Projector* projector, nlohmann::json metadata) {
  Checkpoint ckpt;
  ckpt.metadata = std::move(metadata);
  ckpt.metadata["encoder"] = encoder.config();
  ckpt.params.append(encoder.params());
  if (projector) {
    ckpt.metadata["projector"] = projector->config();
    ckpt.params.append(projector->params());
  }
  return ckpt;
}

inline Encoder encoder_from_checkpoint(const Checkpoint& ckpt) {
  if (!ckpt.metadata.contains("encoder")) throw IoError("checkpoint: no encoder config in metadata");
  for (const auto& p : ckpt.params.entries())
    if (!p.name.starts_with("encoder.") && !p.name.starts_with("projector."))
      throw IoError("checkpoint: unknown parameter " + p.name);
  Rng rng(0);
  Encoder enc(ckpt.metadata.at("encoder").get<EncoderConfig>(), rng);
  load_params(enc.params(), ckpt.params, "encoder.");
  return enc;
}

inline std::optional<Projector> projector_from_checkpoint(const Checkpoint& ckpt) {
  if (!ckpt.metadata.contains("projector")) return std::nullopt;
  Rng rng(0);
  const auto d = ckpt.metadata.at("encoder").get<EncoderConfig>().rep_dim;
  Projector proj(d, ckpt.metadata.at("projector").get<ProjectorConfig>(), rng);
  load_params(proj.params(), ckpt.params, "projector.");
  return proj;
}

}  // namespace DEACL_PRECISION_NS
}  // namespace deacl

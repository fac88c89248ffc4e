#pragma once

// End-to-end multi-site forecaster: input projections, pseudo-spatial
// encodings, the spatial-relation matrix, an MKST bootstrap of future energy
// latents, stacked joint processing blocks, a final MKST with residual and a
// linear output head.

#include <chrono>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <random>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "mkst/attention.hpp"
#include "mkst/config.hpp"
#include "mkst/data.hpp"
#include "mkst/jpb.hpp"
#include "mkst/revin.hpp"

namespace mkst {

struct ModelConfig {
  std::size_t energy_sites = 0;   // L_E
  std::size_t weather_sites = 0;  // L_W
  std::size_t history = 0;        // T_h
  std::size_t horizon = 0;        // T_f
  std::size_t weather_vars = 0;   // D_W (including time features for solar)

  std::size_t model_dim = 48;  // D_r
  std::size_t key_dim = 16;    // D_K
  std::size_t value_dim = 16;  // D_V
  std::vector<std::size_t> kernel_sizes{3, 5, 7};
  std::size_t levels = 4;       // UTCAE pyramid levels P
  std::size_t blocks = 3;       // stacked JPBs
  std::size_t lambda_dim = 16;  // D_lambda
  double dropout = 0.1;
  bool revin = true;

  std::size_t heads() const { return kernel_sizes.size(); }
  std::size_t encoding_dim() const { return energy_sites + weather_sites; }

  std::vector<std::string> problems() const {
    std::vector<std::string> p;
    auto positive = [&](std::size_t v, const char* name) {
      if (v == 0) p.push_back(std::string(name) + " must be >= 1");
    };
    positive(energy_sites, "L_E");
    positive(weather_sites, "L_W");
    positive(history, "T_h");
    positive(horizon, "T_f");
    positive(weather_vars, "D_W");
    positive(model_dim, "d_model");
    positive(key_dim, "key_dim");
    positive(value_dim, "value_dim");
    positive(levels, "levels");
    positive(blocks, "blocks");
    positive(lambda_dim, "lambda_dim");
    if (kernel_sizes.empty()) p.push_back("kernel_sizes must not be empty");
    for (std::size_t c : kernel_sizes)
      if (c % 2 == 0) p.push_back("kernel size " + std::to_string(c) + " must be odd and positive");
    if (kernel_sizes.size() * value_dim != model_dim)
      p.push_back("len(kernel_sizes) * value_dim must equal d_model (" + std::to_string(kernel_sizes.size()) + " * " +
                  std::to_string(value_dim) + " != " + std::to_string(model_dim) + ")");
    if (!(dropout >= 0.0 && dropout < 1.0)) p.push_back("dropout must lie in [0, 1)");
    return p;
  }

  void validate() const {
    auto p = problems();
    if (p.empty()) return;
    std::string msg = "model config validation failed:";
    for (const auto& s : p) msg += "\n  - " + s;
    throw ValidationError(msg);
  }

  /// Architecture keys from a model config file; data-dependent sizes are
  /// filled in by the caller.
  static ModelConfig parse(KeyValueConfig& kv) {
    ModelConfig c;
    c.model_dim = kv.optional<std::size_t>("d_model", c.model_dim);
    c.key_dim = kv.optional<std::size_t>("key_dim", c.key_dim);
    c.value_dim = kv.optional<std::size_t>("value_dim", c.value_dim);
    c.kernel_sizes = kv.size_list("kernel_sizes", c.kernel_sizes);
    c.levels = kv.optional<std::size_t>("levels", c.levels);
    c.blocks = kv.optional<std::size_t>("blocks", c.blocks);
    c.lambda_dim = kv.optional<std::size_t>("lambda_dim", c.lambda_dim);
    c.dropout = kv.optional<double>("dropout", c.dropout);
    c.revin = kv.optional<bool>("revin", c.revin);
    ModelConfig probe = c;
    probe.energy_sites = probe.weather_sites = probe.history = probe.horizon = probe.weather_vars = 1;
    for (auto& p : probe.problems()) kv.error(p);
    return c;
  }

  nlohmann::json to_json() const {
    return {{"energy_sites", energy_sites}, {"weather_sites", weather_sites}, {"history", history},
            {"horizon", horizon},           {"weather_vars", weather_vars},   {"model_dim", model_dim},
            {"key_dim", key_dim},           {"value_dim", value_dim},         {"kernel_sizes", kernel_sizes},
            {"levels", levels},             {"blocks", blocks},               {"lambda_dim", lambda_dim},
            {"dropout", dropout},           {"revin", revin}};
  }

  static ModelConfig from_json(const nlohmann::json& j) {
    ModelConfig c;
    j.at("energy_sites").get_to(c.energy_sites);
    j.at("weather_sites").get_to(c.weather_sites);
    j.at("history").get_to(c.history);
    j.at("horizon").get_to(c.horizon);
    j.at("weather_vars").get_to(c.weather_vars);
    j.at("model_dim").get_to(c.model_dim);
    j.at("key_dim").get_to(c.key_dim);
    j.at("value_dim").get_to(c.value_dim);
    j.at("kernel_sizes").get_to(c.kernel_sizes);
    j.at("levels").get_to(c.levels);
    j.at("blocks").get_to(c.blocks);
    j.at("lambda_dim").get_to(c.lambda_dim);
    j.at("dropout").get_to(c.dropout);
    j.at("revin").get_to(c.revin);
    return c;
  }

  friend bool operator==(const ModelConfig&, const ModelConfig&) = default;
};

template <typename T>
struct ModelParams {
  Var<T> energy_proj, energy_bias;    // [1 x D_r], [D_r]
  Var<T> weather_proj, weather_bias;  // [D_W x D_r], [D_r]
  Var<T> encoding_proj;               // [D_S x D_r]
  attention::SpatialEncodingParams<T> spatial;
  attention::MKParams<T> bootstrap;
  std::vector<JpbParams<T>> blocks;
  attention::MKParams<T> final_attention;
  Var<T> head, head_bias;              // [D_r x 1], [1]
  Var<T> revin_gain, revin_shift;      // [L_E]

  template <typename Rng>
  static ModelParams random(const ModelConfig& c, Rng& rng) {
    ModelParams p;
    p.energy_proj = fan_in_param<T>({1, c.model_dim}, 1, rng);
    p.energy_bias = zero_param<T>({c.model_dim});
    p.weather_proj = fan_in_param<T>({c.weather_vars, c.model_dim}, c.weather_vars, rng);
    p.weather_bias = zero_param<T>({c.model_dim});
    p.encoding_proj = fan_in_param<T>({c.encoding_dim(), c.model_dim}, c.encoding_dim(), rng);
    p.spatial = attention::SpatialEncodingParams<T>::random(c.model_dim, c.lambda_dim, rng);
    p.bootstrap = attention::MKParams<T>::random(c.kernel_sizes, c.model_dim, c.key_dim, c.value_dim, true, rng);
    for (std::size_t b = 0; b < c.blocks; ++b)
      p.blocks.push_back(JpbParams<T>::random(c.levels, c.model_dim, c.kernel_sizes, c.key_dim, c.value_dim, rng));
    p.final_attention = attention::MKParams<T>::random(c.kernel_sizes, c.model_dim, c.key_dim, c.value_dim, true, rng);
    p.head = fan_in_param<T>({c.model_dim, 1}, c.model_dim, rng);
    p.head_bias = zero_param<T>({1});
    p.revin_gain = Var<T>(Tensor<T>({c.energy_sites}, T{1}), true);
    p.revin_shift = zero_param<T>({c.energy_sites});
    return p;
  }

  /// Every trainable tensor with a stable, unique name. RevIN parameters are
  /// listed only when RevIN is enabled.
  ParamList<T> named(bool with_revin) const {
    ParamList<T> out;
    out.push_back({"input.energy.weight", energy_proj});
    out.push_back({"input.energy.bias", energy_bias});
    out.push_back({"input.weather.weight", weather_proj});
    out.push_back({"input.weather.bias", weather_bias});
    out.push_back({"encoding.weight", encoding_proj});
    spatial.collect("spatial", out);
    bootstrap.collect("bootstrap", out);
    for (std::size_t b = 0; b < blocks.size(); ++b) blocks[b].collect("jpb" + std::to_string(b), out);
    final_attention.collect("final", out);
    out.push_back({"head.weight", head});
    out.push_back({"head.bias", head_bias});
    if (with_revin) {
      out.push_back({"revin.gain", revin_gain});
      out.push_back({"revin.shift", revin_shift});
    }
    return out;
  }
};

enum class Mode { train, eval };

template <typename T>
struct ForwardOutput {
  Var<T> prediction;  // [L_E x T_f x 1]
  Var<T> spatial;     // [L_E x L_W]
};

template <typename T>
class Forecaster {
 public:
  Forecaster(ModelConfig config, ModelParams<T> params) : config_(std::move(config)), params_(std::move(params)) {
    config_.validate();
  }

  template <typename Rng>
  static Forecaster create(const ModelConfig& config, Rng& rng) {
    config.validate();
    return Forecaster(config, ModelParams<T>::random(config, rng));
  }

  const ModelConfig& config() const { return config_; }
  void set_dropout(double rate) {
    if (!(rate >= 0.0 && rate < 1.0)) throw ValidationError("dropout must lie in [0, 1)");
    config_.dropout = rate;
  }
  const ModelParams<T>& params() const { return params_; }
  ModelParams<T>& params() { return params_; }
  ParamList<T> parameters() const { return params_.named(config_.revin); }

  /// One-hot pseudo-spatial encodings for energy sites then weather sites.
  Tensor<T> one_hot_encodings() const {
    const std::size_t n = config_.encoding_dim();
    Tensor<T> s({n, n});
    for (std::size_t i = 0; i < n; ++i) s.at(i, i) = T{1};
    return s;
  }

  /// Projected encodings split into energy rows [L_E x D_r] and weather rows [L_W x D_r].
  std::pair<Var<T>, Var<T>> projected_encodings() const {
    auto projected = matmul(Var<T>(one_hot_encodings()), params_.encoding_proj);
    return {slice(projected, 0, 0, config_.energy_sites), slice(projected, 0, config_.energy_sites, config_.weather_sites)};
  }

  /// The learned [L_E x L_W] spatial-relation matrix; independent of input data.
  Var<T> spatial_matrix() const {
    auto [enc_e, enc_w] = projected_encodings();
    return attention::spatial_weights(enc_e, enc_w, params_.spatial);
  }

  void check_sample(const data::ForecastSample<T>& s) const {
    const auto& c = config_;
    auto expect = [](const Tensor<T>& t, const Shape& want, const char* name) {
      if (t.shape() != want)
        throw ShapeError(std::string("sample ") + name + " has shape " + shape_str(t.shape()) + ", model expects " +
                         shape_str(want));
    };
    expect(s.energy_history, {c.energy_sites, c.history, 1}, "energy history");
    expect(s.weather_history, {c.weather_sites, c.history, c.weather_vars}, "weather history");
    expect(s.weather_future, {c.weather_sites, c.horizon, c.weather_vars}, "weather future");
    if (s.has_target()) expect(s.target, {c.energy_sites, c.horizon, 1}, "target");
  }

  /// Dropout is active only in train mode with an rng supplied.
  ForwardOutput<T> forward(const data::ForecastSample<T>& s, Mode mode, std::mt19937_64* rng = nullptr) const {
    check_sample(s);
    const auto& c = config_;
    const auto& p = params_;
    std::mt19937_64* drop_rng = mode == Mode::train ? rng : nullptr;
    const T rate = drop_rng ? static_cast<T>(c.dropout) : T{0};
    auto drop = [&](const Var<T>& x) { return drop_rng ? dropout(x, rate, *drop_rng) : x; };

    Var<T> energy_hist(s.energy_history);
    RevinState<T> revin_state;
    if (c.revin) {
      auto [normed, st] = revin_apply(energy_hist, p.revin_gain, p.revin_shift);
      energy_hist = normed;
      revin_state = std::move(st);
    }

    auto e_h = drop(linear(energy_hist, p.energy_proj, p.energy_bias));
    auto w_h = drop(linear(Var<T>(s.weather_history), p.weather_proj, p.weather_bias));
    auto w_f = drop(linear(Var<T>(s.weather_future), p.weather_proj, p.weather_bias));

    auto [enc_e, enc_w] = projected_encodings();
    e_h = add_site_rows(e_h, enc_e);
    w_h = add_site_rows(w_h, enc_w);
    w_f = add_site_rows(w_f, enc_w);
    check_finite(e_h, "input projection");

    auto y = attention::spatial_weights(enc_e, enc_w, p.spatial);
    check_finite(y, "spatial weights");

    auto e_f = attention::mkst_attention(w_f, w_h, e_h, y, p.bootstrap);
    check_finite(e_f, "bootstrap attention");

    auto energy = concat(e_h, e_f, 1);
    auto weather = concat(w_h, w_f, 1);
    for (std::size_t b = 0; b < p.blocks.size(); ++b) {
      auto out = jpb_forward(energy, weather, y, p.blocks[b], rate, drop_rng);
      energy = out.energy;
      weather = out.weather;
      check_finite(energy, "joint processing block");
    }

    auto e_h_j = slice(energy, 1, 0, c.history);
    auto e_f_j = slice(energy, 1, c.history, c.horizon);
    auto w_h_j = slice(weather, 1, 0, c.history);
    auto w_f_j = slice(weather, 1, c.history, c.horizon);
    auto e_out = attention::mkst_attention(w_f_j, w_h_j, e_h_j, y, p.final_attention) + e_f_j;
    check_finite(e_out, "final attention");

    auto pred = linear(e_out, p.head, p.head_bias);
    if (c.revin) pred = revin_invert(pred, revin_state, p.revin_gain, p.revin_shift);
    check_finite(pred, "output head");
    return {pred, y};
  }

  Tensor<T> predict(const data::ForecastSample<T>& s) const {
    NoGradGuard guard;
    return forward(s, Mode::eval).prediction.value();
  }

 private:
  static void check_finite(const Var<T>& v, const char* stage) {
    if (!v.value().all_finite()) throw NumericalError(std::string("non-finite values after stage `") + stage + "`");
  }

  ModelConfig config_;
  ModelParams<T> params_;
};

template <typename T>
struct BatchPrediction {
  std::vector<Tensor<T>> predictions;  // each [L_E x T_f x 1]
  std::vector<double> seconds;
};

/// Eval-mode forward for every sample, in input order. Shapes are checked for
/// the whole batch before any compute.
template <typename T>
BatchPrediction<T> predict_batch(const Forecaster<T>& model, const std::vector<data::ForecastSample<T>>& samples,
                                 bool clip = true) {
  if (samples.empty()) throw ValidationError("predict_batch: empty batch");
  for (std::size_t i = 0; i < samples.size(); ++i) {
    try {
      model.check_sample(samples[i]);
    } catch (const ShapeError& e) {
      throw ShapeError("predict_batch: sample " + std::to_string(i) + ": " + e.what());
    }
  }
  BatchPrediction<T> out;
  for (const auto& s : samples) {
    const auto start = std::chrono::steady_clock::now();
    Tensor<T> p = model.predict(s);
    if (clip)
      for (auto& v : p.storage()) v = std::clamp(v, T{0}, T{1});
    out.seconds.push_back(std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count());
    out.predictions.push_back(std::move(p));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Checkpoints
//
// Layout: 8-byte magic "MKSTCKPT", u32 format version, u64 header length,
// JSON header {format, scalar, model_config, metadata, tensors[{name, shape,
// offset, count}]}, then raw little-endian tensor data in header order.

inline constexpr char kCheckpointMagic[8] = {'M', 'K', 'S', 'T', 'C', 'K', 'P', 'T'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

template <typename T>
constexpr const char* scalar_name() {
  if constexpr (std::is_same_v<T, double>)
    return "float64";
  else if constexpr (std::is_same_v<T, float>)
    return "float32";
  else
    return "unknown";
}

template <typename T>
void save_checkpoint(const std::filesystem::path& path, const Forecaster<T>& model, const nlohmann::json& metadata = {}) {
  const auto params = model.params().named(true);
  nlohmann::json header;
  header["format"] = kCheckpointVersion;
  header["scalar"] = scalar_name<T>();
  header["model_config"] = model.config().to_json();
  header["metadata"] = metadata.is_null() ? nlohmann::json::object() : metadata;
  std::uint64_t offset = 0;
  for (const auto& p : params) {
    header["tensors"].push_back(
        {{"name", p.name}, {"shape", p.var.shape()}, {"offset", offset}, {"count", p.var.value().size()}});
    offset += p.var.value().size();
  }
  const std::string text = header.dump();
  const auto tmp = path.string() + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot write checkpoint " + tmp);
    out.write(kCheckpointMagic, sizeof(kCheckpointMagic));
    const std::uint32_t version = kCheckpointVersion;
    const std::uint64_t len = text.size();
    out.write(reinterpret_cast<const char*>(&version), sizeof(version));
    out.write(reinterpret_cast<const char*>(&len), sizeof(len));
    out.write(text.data(), static_cast<std::streamsize>(text.size()));
    for (const auto& p : params)
      out.write(reinterpret_cast<const char*>(p.var.value().data().data()),
                static_cast<std::streamsize>(p.var.value().size() * sizeof(T)));
    if (!out) throw IoError("failed writing checkpoint " + tmp);
  }
  std::filesystem::rename(tmp, path);
}

template <typename T>
struct LoadedCheckpoint {
  Forecaster<T> model;
  nlohmann::json metadata;
};

template <typename T>
LoadedCheckpoint<T> load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open checkpoint " + path.string());
  char magic[8];
  std::uint32_t version = 0;
  std::uint64_t len = 0;
  in.read(magic, sizeof(magic));
  in.read(reinterpret_cast<char*>(&version), sizeof(version));
  in.read(reinterpret_cast<char*>(&len), sizeof(len));
  if (!in || std::memcmp(magic, kCheckpointMagic, sizeof(magic)) != 0)
    throw ValidationError(path.string() + " is not a checkpoint file");
  if (version != kCheckpointVersion)
    throw ValidationError("unsupported checkpoint version " + std::to_string(version));
  std::string text(len, '\0');
  in.read(text.data(), static_cast<std::streamsize>(len));
  if (!in) throw IoError("truncated checkpoint header in " + path.string());
  nlohmann::json header;
  try {
    header = nlohmann::json::parse(text);
  } catch (const nlohmann::json::exception& e) {
    throw ValidationError("corrupt checkpoint header: " + std::string(e.what()));
  }
  try {
    if (header.at("scalar").get<std::string>() != scalar_name<T>())
      throw ValidationError("checkpoint scalar type " + header.at("scalar").get<std::string>() + " does not match " +
                            scalar_name<T>());
    const auto config = ModelConfig::from_json(header.at("model_config"));
    std::mt19937_64 rng(0);
    auto model = Forecaster<T>::create(config, rng);
    auto params = model.params().named(true);
    const auto& tensors = header.at("tensors");
    if (tensors.size() != params.size())
      throw ValidationError("checkpoint holds " + std::to_string(tensors.size()) + " tensors, model expects " +
                            std::to_string(params.size()));
    for (std::size_t i = 0; i < params.size(); ++i) {
      const auto& entry = tensors[i];
      if (entry.at("name").get<std::string>() != params[i].name ||
          entry.at("shape").get<Shape>() != params[i].var.shape())
        throw ValidationError("checkpoint tensor `" + entry.at("name").get<std::string>() + "` does not match `" +
                              params[i].name + "` " + shape_str(params[i].var.shape()));
      auto& dst = params[i].var.mutable_value();
      in.read(reinterpret_cast<char*>(dst.data().data()), static_cast<std::streamsize>(dst.size() * sizeof(T)));
      if (!in) throw IoError("truncated checkpoint data in " + path.string());
    }
    return {std::move(model), header.value("metadata", nlohmann::json::object())};
  } catch (const nlohmann::json::exception& e) {
    throw ValidationError("malformed checkpoint header in " + path.string() + ": " + e.what());
  }
}

}  // namespace mkst

#include "pm25/model.hpp"

#include <fstream>
#include <sstream>

namespace pm25 {

using ad::Tensor;

namespace {

const char* activation_name(Activation a) { return a == Activation::relu ? "relu" : "selu"; }
const char* norm_name(NormSite n) { return n == NormSite::layer ? "layer" : (n == NormSite::batch ? "batch" : "none"); }
const char* gate_name(GateConvention g) { return g == GateConvention::retain ? "retain" : "blend"; }

[[noreturn]] void bad_config(const std::string& what) {
  throw Error(Errc::config_invalid, "model config: " + what, {{"field", what}});
}

template <typename E>
E parse_enum(const json& j, const char* key, std::initializer_list<std::pair<const char*, E>> table, E fallback) {
  if (!j.contains(key)) return fallback;
  const auto s = j.at(key).get<std::string>();
  for (const auto& [name, v] : table) {
    if (s == name) return v;
  }
  throw Error(Errc::config_invalid, std::string("unknown value '") + s + "' for " + key, {{"field", key}, {"value", s}});
}

std::string gru_name(Index layer, const char* field) { return "gru" + std::to_string(layer) + "." + field; }

Tensor one_minus(const Tensor& z) { return ad::shift(ad::scale(z, -1.0), 1.0); }

Tensor affine(const Tensor& x, const Tensor& scale, const Tensor& shift) { return x * scale + shift; }

}  // namespace

void ModelConfig::validate() const {
  if (peers < 1) bad_config("peers");
  if (window < 1) bad_config("window");
  if (leads.empty()) bad_config("leads");
  for (std::size_t i = 0; i < leads.size(); ++i) {
    if (leads[i] < 1 || (i > 0 && leads[i] <= leads[i - 1])) bad_config("leads");
  }
  if (conv_channels < 1) bad_config("conv_channels");
  if (conv_kernel[0] < 1 || conv_kernel[0] > input_rows()) bad_config("conv_kernel");
  if (conv_kernel[1] < 1 || conv_kernel[1] > window) bad_config("conv_kernel");
  if (gru_layers < 1) bad_config("gru_layers");
  if (gru_hidden < 1) bad_config("gru_hidden");
  for (const Index d : mlp_dims) {
    if (d < 1) bad_config("mlp_dims");
  }
  if (met_embed < 1) bad_config("met_embed");
  if (!(dropout >= 0.0 && dropout < 1.0)) bad_config("dropout");
  if (analog_rows < 0) bad_config("analog_rows");
  if (aux_features < 1) bad_config("aux_features");
}

json ModelConfig::to_json() const {
  return json{{"peers", peers},
              {"window", window},
              {"leads", leads},
              {"conv_channels", conv_channels},
              {"conv_kernel", conv_kernel},
              {"gru_layers", gru_layers},
              {"gru_hidden", gru_hidden},
              {"mlp_dims", mlp_dims},
              {"met_embed", met_embed},
              {"dropout", dropout},
              {"activation", activation_name(activation)},
              {"norm_site", norm_name(norm_site)},
              {"gate", gate_name(gate)},
              {"analog_rows", analog_rows},
              {"aux_features", aux_features}};
}

ModelConfig ModelConfig::from_json(const json& j) {
  ModelConfig c;
  c.peers = j.value("peers", c.peers);
  c.window = j.value("window", c.window);
  c.leads = j.value("leads", c.leads);
  c.conv_channels = j.value("conv_channels", c.conv_channels);
  c.conv_kernel = j.value("conv_kernel", c.conv_kernel);
  c.gru_layers = j.value("gru_layers", c.gru_layers);
  c.gru_hidden = j.value("gru_hidden", c.gru_hidden);
  c.mlp_dims = j.value("mlp_dims", c.mlp_dims);
  c.met_embed = j.value("met_embed", c.met_embed);
  c.dropout = j.value("dropout", c.dropout);
  c.activation = parse_enum<Activation>(j, "activation", {{"relu", Activation::relu}, {"selu", Activation::selu}}, c.activation);
  c.norm_site = parse_enum<NormSite>(
      j, "norm_site", {{"layer", NormSite::layer}, {"batch", NormSite::batch}, {"none", NormSite::none}}, c.norm_site);
  c.gate = parse_enum<GateConvention>(j, "gate", {{"retain", GateConvention::retain}, {"blend", GateConvention::blend}},
                                      c.gate);
  c.analog_rows = j.value("analog_rows", c.analog_rows);
  c.aux_features = j.value("aux_features", c.aux_features);
  return c;
}

ModelConfig ModelConfig::preset(const std::string& name, Index peers) {
  ModelConfig c;
  c.peers = peers;
  if (name == "base") return c;
  if (name == "wide") {
    c.gru_hidden = 256;
    c.activation = Activation::selu;
    c.conv_kernel = {peers, 3};
    return c;
  }
  throw Error(Errc::config_invalid, "unknown model preset '" + name + "'", {{"preset", name}});
}

Index parameter_count(const ModelConfig& c) {
  const Index h = c.gru_hidden;
  Index n = c.conv_channels * c.conv_kernel[0] * c.conv_kernel[1] + c.conv_channels;
  for (Index l = 0; l < c.gru_layers; ++l) {
    const Index in = l == 0 ? c.gru_input() : h;
    n += 3 * (in * h + h * h + h);
  }
  n += 2 * h;  // phi
  Index in = c.window * c.aux_features;
  for (const Index d : c.mlp_dims) {
    n += in * d + d;
    in = d;
  }
  n += in * c.met_embed + c.met_embed;
  if (c.norm_site != NormSite::none) n += 2 * c.head_input();
  n += c.head_input() * c.horizon() + c.horizon();
  return n;
}

// ---------------------------------------------------------------------------

const Tensor& ModelParams::at(const std::string& name) const {
  for (std::size_t i = 0; i < names.size(); ++i) {
    if (names[i] == name) return tensors[i];
  }
  throw Error(Errc::shape_mismatch, "no parameter named '" + name + "'", {{"name", name}});
}

bool ModelParams::contains(const std::string& name) const {
  return std::find(names.begin(), names.end(), name) != names.end();
}

Index ModelParams::count() const {
  Index n = 0;
  for (const auto& t : tensors) n += t.numel();
  return n;
}

void ModelParams::add(std::string name, Tensor t) {
  names.push_back(std::move(name));
  tensors.push_back(std::move(t));
}

ModelParams ModelParams::clone() const {
  ModelParams out;
  out.names = names;
  for (const auto& t : tensors) out.tensors.push_back(Tensor::parameter(t.shape(), t.value()));
  out.buffers = buffers;
  return out;
}

namespace {

// Shapes and fan-in in canonical order; fan_in 0 marks a bias, -1 a norm scale.
struct ParamSpec {
  std::string name;
  ad::Shape shape;
  Index fan_in;
};

std::vector<ParamSpec> param_specs(const ModelConfig& c) {
  c.validate();
  const Index kh = c.conv_kernel[0], kw = c.conv_kernel[1], h = c.gru_hidden;
  std::vector<ParamSpec> s;
  s.push_back({"conv.weight", {c.conv_channels, 1, kh, kw}, kh * kw});
  s.push_back({"conv.bias", {c.conv_channels}, 0});
  for (Index l = 0; l < c.gru_layers; ++l) {
    const Index in = l == 0 ? c.gru_input() : h;
    for (const char* gate : {"z", "r", "h"}) {
      s.push_back({gru_name(l, (std::string("W_") + gate).c_str()), {in, h}, in});
      s.push_back({gru_name(l, (std::string("U_") + gate).c_str()), {h, h}, h});
      s.push_back({gru_name(l, (std::string("b_") + gate).c_str()), {h}, 0});
    }
  }
  s.push_back({"phi.scale", {h}, -1});
  s.push_back({"phi.shift", {h}, 0});
  Index in = c.window * c.aux_features;
  std::vector<Index> dims = c.mlp_dims;
  dims.push_back(c.met_embed);
  for (std::size_t i = 0; i < dims.size(); ++i) {
    s.push_back({"mlp" + std::to_string(i) + ".weight", {in, dims[i]}, in});
    s.push_back({"mlp" + std::to_string(i) + ".bias", {dims[i]}, 0});
    in = dims[i];
  }
  if (c.norm_site != NormSite::none) {
    s.push_back({"norm.scale", {c.head_input()}, -1});
    s.push_back({"norm.shift", {c.head_input()}, 0});
  }
  s.push_back({"head.weight", {c.head_input(), c.horizon()}, c.head_input()});
  s.push_back({"head.bias", {c.horizon()}, 0});
  return s;
}

void init_buffers(ModelParams& p, const ModelConfig& c) {
  if (c.norm_site == NormSite::batch) {
    p.buffers["norm.running_mean"] = Eigen::ArrayXd::Zero(c.head_input());
    p.buffers["norm.running_var"] = Eigen::ArrayXd::Ones(c.head_input());
  }
}

}  // namespace

ModelParams init_params(const ModelConfig& cfg, std::uint64_t seed) {
  const CounterRng root(seed);
  ModelParams p;
  std::uint64_t stream = 0;
  for (const auto& spec : param_specs(cfg)) {
    const Index n = ad::numel(spec.shape);
    Eigen::ArrayXd v(n);
    if (spec.fan_in > 0) {
      CounterRng rng = root.split(stream);
      const double sd = std::sqrt(2.0 / static_cast<double>(spec.fan_in));
      for (Index i = 0; i < n; ++i) v(i) = sd * rng.normal();
    } else {
      v.setConstant(spec.fan_in < 0 ? 1.0 : 0.0);
    }
    ++stream;
    p.add(spec.name, Tensor::parameter(spec.shape, std::move(v)));
  }
  init_buffers(p, cfg);
  return p;
}

ModelParams zero_params(const ModelConfig& cfg) {
  ModelParams p;
  for (const auto& spec : param_specs(cfg)) p.add(spec.name, Tensor::zeros(spec.shape, true));
  init_buffers(p, cfg);
  return p;
}

GruLayer gru_layer(const ModelParams& p, Index l) {
  return {p.at(gru_name(l, "W_z")), p.at(gru_name(l, "U_z")), p.at(gru_name(l, "b_z")),
          p.at(gru_name(l, "W_r")), p.at(gru_name(l, "U_r")), p.at(gru_name(l, "b_r")),
          p.at(gru_name(l, "W_h")), p.at(gru_name(l, "U_h")), p.at(gru_name(l, "b_h"))};
}

namespace {

// Inputs already multiplied by W_* with bias added.
Tensor gru_step_projected(const Tensor& xz, const Tensor& xr, const Tensor& xh, const Tensor& h_prev,
                          const GruLayer& g, GateConvention gate) {
  const Tensor z = ad::sigmoid(xz + ad::matmul(h_prev, g.U_z));
  const Tensor r = ad::sigmoid(xr + ad::matmul(h_prev, g.U_r));
  const Tensor cand = ad::tanh(xh + ad::matmul(r * h_prev, g.U_h));
  if (gate == GateConvention::retain) return z * h_prev + one_minus(z) * cand;
  return one_minus(z) * h_prev + z * cand;
}

}  // namespace

Tensor gru_step(const Tensor& x, const Tensor& h_prev, const GruLayer& g, GateConvention gate) {
  if (x.rank() != 2 || h_prev.rank() != 2 || x.dim(0) != h_prev.dim(0) || x.dim(1) != g.W_z.dim(0) ||
      h_prev.dim(1) != g.U_z.dim(0)) {
    throw Error(Errc::shape_mismatch, "gru_step: x " + ad::shape_str(x.shape()) + " / h " + ad::shape_str(h_prev.shape()) +
                                          " do not match layer " + ad::shape_str(g.W_z.shape()),
                {{"op", "gru_step"}, {"x", x.shape()}, {"h", h_prev.shape()}});
  }
  return gru_step_projected(ad::matmul(x, g.W_z) + g.b_z, ad::matmul(x, g.W_r) + g.b_r, ad::matmul(x, g.W_h) + g.b_h,
                            h_prev, g, gate);
}

Tensor forward(std::span<const Sample* const> batch, const ModelParams& params, const ModelConfig& cfg,
               const ForwardOptions& opts) {
  const auto n = static_cast<Index>(batch.size());
  if (n == 0) throw Error(Errc::shape_mismatch, "forward: empty batch", {{"stage", "input"}});
  const Index rows = cfg.input_rows(), tau = cfg.window, f = cfg.aux_features;
  Eigen::ArrayXd xs(n * rows * tau);
  Eigen::ArrayXd aux(n * tau * f);
  for (Index i = 0; i < n; ++i) {
    const Sample& s = *batch[static_cast<std::size_t>(i)];
    if (s.x.rows() != rows || s.x.cols() != tau || s.aux.rows() != tau || s.aux.cols() != f) {
      throw Error(Errc::shape_mismatch, "forward: sample shape does not match the model config",
                  {{"stage", "input"},
                   {"x", {s.x.rows(), s.x.cols()}},
                   {"aux", {s.aux.rows(), s.aux.cols()}},
                   {"expected_x", {rows, tau}},
                   {"expected_aux", {tau, f}}});
    }
    xs.segment(i * rows * tau, rows * tau) = Eigen::Map<const Eigen::ArrayXd>(s.x.data(), rows * tau);
    aux.segment(i * tau * f, tau * f) = Eigen::Map<const Eigen::ArrayXd>(s.aux.data(), tau * f);
  }
  const bool train = opts.train;
  const double p = cfg.dropout;

  // (1)-(2) one-channel image through the convolution
  Tensor x = Tensor::constant({n, 1, rows, tau}, std::move(xs));
  Tensor c = ad::conv2d(x, params.at("conv.weight"), params.at("conv.bias"));
  c = cfg.activation == Activation::relu ? ad::relu(c) : ad::selu(c);

  // (3) one feature vector per output time column: [T', N, C*H']
  const Index steps = cfg.seq_len(), feat = cfg.gru_input(), h = cfg.gru_hidden;
  Tensor seq = ad::reshape(ad::permute(c, {3, 0, 1, 2}), {steps * n, feat});

  // (4) stacked GRU, input projections for all steps at once
  Tensor hidden;
  for (Index l = 0; l < cfg.gru_layers; ++l) {
    const GruLayer g = gru_layer(params, l);
    const Tensor xz = ad::matmul(seq, g.W_z) + g.b_z;
    const Tensor xr = ad::matmul(seq, g.W_r) + g.b_r;
    const Tensor xh = ad::matmul(seq, g.W_h) + g.b_h;
    hidden = Tensor::zeros({n, h});
    const bool last = l + 1 == cfg.gru_layers;
    std::vector<Tensor> outs;
    for (Index t = 0; t < steps; ++t) {
      hidden = gru_step_projected(ad::slice(xz, t * n, (t + 1) * n), ad::slice(xr, t * n, (t + 1) * n),
                                  ad::slice(xh, t * n, (t + 1) * n), hidden, g, cfg.gate);
      if (!last) outs.push_back(hidden);
    }
    if (!last) seq = ad::dropout(ad::concat(outs, 0), p, train, opts.rng);
  }

  // (5) phi
  Tensor hv = affine(ad::layer_norm(hidden, -1), params.at("phi.scale"), params.at("phi.shift"));

  // (6) meteorological embedding
  Tensor m = Tensor::constant({n, tau * f}, std::move(aux));
  for (std::size_t i = 0; i <= cfg.mlp_dims.size(); ++i) {
    const std::string k = "mlp" + std::to_string(i);
    m = ad::relu(ad::matmul(m, params.at(k + ".weight")) + params.at(k + ".bias"));
  }

  // (7) concat, normalize, dropout
  Tensor z = ad::concat({hv, m}, 1);
  switch (cfg.norm_site) {
    case NormSite::layer:
      z = affine(ad::layer_norm(z, -1), params.at("norm.scale"), params.at("norm.shift"));
      break;
    case NormSite::batch: {
      const double eps = 1e-5;
      if (train) {
        if (opts.running != nullptr) {
          const Index d = cfg.head_input();
          const Eigen::Map<const RowMatrix> zv(z.value().data(), n, d);
          const Eigen::ArrayXd mu = zv.colwise().mean().transpose().array();
          const Eigen::ArrayXd var = (zv.rowwise() - mu.matrix().transpose()).array().square().colwise().mean().transpose();
          const double mom = opts.bn_momentum;
          auto& rm = opts.running->buffers.at("norm.running_mean");
          auto& rv = opts.running->buffers.at("norm.running_var");
          rm = (1.0 - mom) * rm + mom * mu;
          rv = (1.0 - mom) * rv + mom * var;
        }
        z = affine(ad::layer_norm(z, 0, eps), params.at("norm.scale"), params.at("norm.shift"));
      } else {
        const Eigen::ArrayXd& mu = params.buffers.at("norm.running_mean");
        const Eigen::ArrayXd& var = params.buffers.at("norm.running_var");
        const Index d = cfg.head_input();
        z = (z - Tensor::constant({d}, mu)) * Tensor::constant({d}, (var + eps).rsqrt());
        z = affine(z, params.at("norm.scale"), params.at("norm.shift"));
      }
      break;
    }
    case NormSite::none:
      break;
  }
  z = ad::dropout(z, p, train, opts.rng);

  // (8) direct multi-step head
  return ad::matmul(z, params.at("head.weight")) + params.at("head.bias");
}

Eigen::VectorXd forward(const Sample& sample, const ModelParams& params, const ModelConfig& cfg) {
  const Sample* one[] = {&sample};
  const Tensor out = forward(std::span<const Sample* const>(one, 1), params, cfg);
  return out.value().matrix();
}

json Forecast::to_json() const {
  json values_j = json::array();
  for (std::size_t q = 0; q < leads.size(); ++q) {
    values_j.push_back({{"lead", leads[q]},
                        {"value", values(static_cast<Index>(q))},
                        {"scaled", scaled_values(static_cast<Index>(q))}});
  }
  return json{{"station", target_station}, {"origin", format_iso8601_hour(origin)}, {"forecast", values_j}};
}

Forecast predict(const HourlyPanel& panel, const std::string& station, Index origin, const ModelParams& params,
                 const ModelConfig& cfg, const FeatureScalers& scalers, std::span<const PeerSet> peers,
                 const FeatureConfig& features) {
  const Sample s = make_input_sample(panel, peers, scalers, features, station, origin);
  Forecast fc;
  fc.target_station = station;
  fc.origin = panel.hour_at(origin);
  fc.leads = cfg.leads;
  fc.scaled_values = forward(s, params, cfg);
  fc.values = inverse(scalers.station(station), fc.scaled_values.array()).matrix();
  return fc;
}

// ---------------------------------------------------------------------------

json feature_config_to_json(const FeatureConfig& f) {
  json j{{"window", f.window}, {"leads", f.leads}, {"stride", f.stride}, {"analogs", f.analogs},
         {"wd_sincos", f.wd_sincos}};
  j["analog_exclusion"] = f.analog_exclusion ? json(*f.analog_exclusion) : json(nullptr);
  return j;
}

FeatureConfig feature_config_from_json(const json& j) {
  FeatureConfig f;
  f.window = j.value("window", f.window);
  f.leads = j.value("leads", f.leads);
  f.stride = j.value("stride", f.stride);
  f.analogs = j.value("analogs", f.analogs);
  f.wd_sincos = j.value("wd_sincos", f.wd_sincos);
  if (j.contains("analog_exclusion") && !j.at("analog_exclusion").is_null()) {
    f.analog_exclusion = j.at("analog_exclusion").get<Index>();
  }
  return f;
}

json Checkpoint::to_json() const {
  json ps = json::object();
  for (std::size_t i = 0; i < params.names.size(); ++i) {
    const auto& t = params.tensors[i];
    ps[params.names[i]] = {{"shape", t.shape()},
                           {"data", std::vector<double>(t.value().data(), t.value().data() + t.numel())}};
  }
  json bufs = json::object();
  for (const auto& [k, v] : params.buffers) bufs[k] = std::vector<double>(v.data(), v.data() + v.size());
  return json{{"format_version", kCheckpointVersion},
              {"model_config", model.to_json()},
              {"feature_config", feature_config_to_json(features)},
              {"scalers", scalers.to_json()},
              {"peer_sets", peers_to_json(peers)},
              {"param_order", params.names},
              {"params", ps},
              {"buffers", bufs},
              {"training", training}};
}

Checkpoint Checkpoint::from_json(const json& j) {
  const int version = j.at("format_version").get<int>();
  if (version != kCheckpointVersion) {
    throw Error(Errc::io_error, "unsupported checkpoint version " + std::to_string(version), {{"format_version", version}});
  }
  Checkpoint ck;
  ck.model = ModelConfig::from_json(j.at("model_config"));
  ck.features = feature_config_from_json(j.at("feature_config"));
  ck.scalers = FeatureScalers::from_json(j.at("scalers"));
  ck.peers = peers_from_json(j.at("peer_sets"));
  const auto order = j.at("param_order").get<std::vector<std::string>>();
  const auto expected = param_specs(ck.model);
  for (const auto& name : order) {
    const auto& pj = j.at("params").at(name);
    const auto shape = pj.at("shape").get<ad::Shape>();
    const auto data = pj.at("data").get<std::vector<double>>();
    if (static_cast<Index>(data.size()) != ad::numel(shape)) {
      throw Error(Errc::io_error, "checkpoint parameter '" + name + "' has inconsistent length", {{"name", name}});
    }
    ck.params.add(name, Tensor::parameter(shape, Eigen::Map<const Eigen::ArrayXd>(data.data(), ad::numel(shape))));
  }
  if (ck.params.names.size() != expected.size()) {
    throw Error(Errc::io_error, "checkpoint parameter set does not match its model config");
  }
  for (std::size_t i = 0; i < expected.size(); ++i) {
    if (ck.params.names[i] != expected[i].name || ck.params.tensors[i].shape() != expected[i].shape) {
      throw Error(Errc::io_error, "checkpoint parameter '" + expected[i].name + "' missing or misshapen",
                  {{"name", expected[i].name}});
    }
  }
  for (const auto& [k, v] : j.value("buffers", json::object()).items()) {
    const auto data = v.get<std::vector<double>>();
    ck.params.buffers[k] = Eigen::Map<const Eigen::ArrayXd>(data.data(), static_cast<Index>(data.size()));
  }
  ck.training = j.value("training", json::object());
  return ck;
}

void Checkpoint::save(const std::string& path) const {
  std::ofstream out(path);
  if (!out) throw Error(Errc::io_error, "cannot write checkpoint " + path, {{"path", path}});
  out << to_json().dump(1) << '\n';
}

Checkpoint Checkpoint::load(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw Error(Errc::io_error, "cannot read checkpoint " + path, {{"path", path}});
  try {
    return from_json(json::parse(in));
  } catch (const json::exception& e) {
    throw Error(Errc::io_error, std::string("malformed checkpoint: ") + e.what(), {{"path", path}});
  }
}

}  // namespace pm25

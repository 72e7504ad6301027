#include "sharelora/audit.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <limits>
#include <map>
#include <random>

#include "sharelora/errors.hpp"

namespace sharelora {

namespace {

std::size_t linear_params(const ModelSpec& spec, ModuleType type) {
  const auto [in, out] = module_dims(spec, type);
  return in * out + (spec.linear_bias ? out : 0);
}

std::size_t norm_params(const ModelSpec& spec) { return spec.hidden_dim * (spec.norm_bias ? 2 : 1); }

std::string fmt17(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

}  // namespace

std::string format_millions(std::size_t count) {
  const double m = static_cast<double>(count) / 1e6;
  char buf[64];
  std::snprintf(buf, sizeof buf, m >= 1.0 ? "%.1fM" : "%.2fM", m);
  return buf;
}

std::string AuditReport::rounded() const { return format_millions(total); }

bool matches_printed(std::size_t count, double printed_millions) {
  return std::abs(static_cast<double>(count) - printed_millions * 1e6) < kPaperMatchTolerance;
}

nlohmann::json AuditReport::to_json() const {
  nlohmann::json j = {{"schema_version", kAuditSchemaVersion},
                      {"model", model},
                      {"scheme", scheme},
                      {"rank", rank},
                      {"targets", targets},
                      {"total", total},
                      {"rounded", rounded()}};
  nlohmann::json parts = nlohmann::json::array();
  for (const BreakdownEntry& e : breakdown) parts.push_back({{"component", e.component}, {"count", e.count}});
  j["breakdown"] = parts;
  if (baseline) {
    j["baseline"] = *baseline;
    j["baseline_total"] = *baseline_total;
    j["reduction"] = *reduction;
  }
  return j;
}

std::size_t full_model_params(const ModelSpec& spec, bool include_embeddings_and_head) {
  spec.validate();
  std::size_t total = 0;
  for (ModuleType t : kAllModuleTypes) {
    if (spec.has_module(t)) total += spec.n_layers * linear_params(spec, t);
  }
  total += (2 * spec.n_layers + 1) * norm_params(spec);
  if (include_embeddings_and_head) {
    total += spec.vocab_size * spec.hidden_dim;
    if (spec.learned_positions) total += spec.max_seq_len * spec.hidden_dim;
    if (!spec.tied_head) total += spec.hidden_dim * spec.vocab_size;
  }
  return total;
}

AuditReport count_params(const ModelSpec& spec, const AdapterScheme& scheme) {
  AuditReport report;
  report.model = spec.name;
  report.scheme = scheme.label();
  report.rank = scheme.is_adapter_mode() ? scheme.rank : 0;
  report.targets = targets_str(scheme.targets);

  if (!scheme.is_adapter_mode()) {
    scheme.validate(spec);
    for (ModuleType t : kAllModuleTypes) {
      if (spec.has_module(t)) report.breakdown.push_back({std::string(module_name(t)), spec.n_layers * linear_params(spec, t)});
    }
    report.breakdown.push_back({"norms", (2 * spec.n_layers + 1) * norm_params(spec)});
    report.breakdown.push_back({"embeddings", spec.vocab_size * spec.hidden_dim +
                                                  (spec.learned_positions ? spec.max_seq_len * spec.hidden_dim : 0)});
    report.breakdown.push_back({"head", spec.tied_head ? 0 : spec.hidden_dim * spec.vocab_size});
  } else {
    const AdapterPlan plan = plan_adapters(spec, scheme);
    const std::size_t r = plan.rank;
    std::map<std::string, std::size_t> order;
    std::set<SharedKey> counted;
    auto add = [&](std::string component, std::size_t n) {
      auto it = order.find(component);
      if (it == order.end()) {
        order.emplace(component, report.breakdown.size());
        report.breakdown.push_back({std::move(component), n});
      } else {
        report.breakdown[it->second].count += n;
      }
    };
    for (const AdapterSlot& s : plan.slots) {
      const std::string m(module_name(s.module_type));
      const std::size_t a = s.frozen_a || (s.a_shared && !counted.insert({s.module_type, MatrixRole::kA}).second)
                                ? 0 : s.in_dim * r;
      const std::size_t b = s.b_shared && !counted.insert({s.module_type, MatrixRole::kB}).second ? 0 : r * s.out_dim;
      add(m + ".A", a);
      add(m + ".B", b);
    }
  }
  for (const BreakdownEntry& e : report.breakdown) report.total += e.count;
  return report;
}

AuditReport count_params(const ModelSpec& spec, const AdapterScheme& scheme, const AdapterScheme& baseline) {
  AuditReport report = count_params(spec, scheme);
  const AuditReport base = count_params(spec, baseline);
  report.baseline = base.scheme;
  report.baseline_total = base.total;
  if (base.total == 0) throw ConfigError("baseline scheme '" + base.scheme + "' has no trainable parameters");
  report.reduction = 1.0 - static_cast<double>(report.total) / static_cast<double>(base.total);
  return report;
}

nlohmann::json PrecisionConfig::to_json() const {
  return {{"param_bytes", param_bytes},   {"grad_bytes", grad_bytes},     {"moment_bytes", moment_bytes},
          {"moments", moments},           {"frozen_bytes", frozen_bytes}, {"activation_bytes", activation_bytes}};
}

nlohmann::json MemoryModel::to_json() const {
  return {{"schema_version", kAuditSchemaVersion},
          {"trainable_params", trainable_params},
          {"frozen_params", frozen_params},
          {"bytes",
           {{"params", params},
            {"gradients", gradients},
            {"moments", moments},
            {"frozen", frozen},
            {"activations", activations},
            {"trainable_state", trainable_state()},
            {"total", total()}}},
          {"batch", batch},
          {"seq", seq},
          {"precision", precision.to_json()}};
}

MemoryModel memory_estimate(const ModelSpec& spec, const AdapterScheme& scheme, const PrecisionConfig& precision,
                            std::size_t batch, std::size_t seq) {
  MemoryModel m;
  m.batch = batch;
  m.seq = seq;
  m.precision = precision;
  const std::size_t full = full_model_params(spec);
  std::size_t adapted_rank_per_token = 0;
  if (scheme.is_adapter_mode()) {
    const AdapterPlan plan = plan_adapters(spec, scheme);
    m.trainable_params = plan.trainable_count();
    std::size_t frozen_a = 0;
    for (const AdapterSlot& s : plan.slots) {
      if (s.frozen_a) frozen_a += s.in_dim * plan.rank;
    }
    m.frozen_params = full + frozen_a;
    adapted_rank_per_token = plan.slots.size() * plan.rank;
  } else {
    scheme.validate(spec);
    m.trainable_params = full;
  }
  const auto t = static_cast<double>(m.trainable_params);
  m.params = t * precision.param_bytes;
  m.gradients = t * precision.grad_bytes;
  m.moments = t * precision.moment_bytes * precision.moments;
  m.frozen = static_cast<double>(m.frozen_params) * precision.frozen_bytes;

  const double tokens = static_cast<double>(batch) * static_cast<double>(seq);
  const double per_layer_token = 10.0 * static_cast<double>(spec.hidden_dim) +
                                 4.0 * static_cast<double>(spec.intermediate_dim) +
                                 2.0 * static_cast<double>(spec.n_heads) * static_cast<double>(seq);
  m.activations = tokens * (static_cast<double>(spec.n_layers) * per_layer_token +
                            static_cast<double>(adapted_rank_per_token)) * precision.activation_bytes;
  return m;
}

// ---- spectra ----

std::vector<double> jacobi_singular_values(std::vector<double> m, std::size_t rows, std::size_t cols,
                                           const std::string& label, int max_sweeps) {
  if (m.size() != rows * cols) throw DimensionError("jacobi_singular_values: " + label + " has wrong element count");
  // Work on the orientation with fewer columns.
  if (cols > rows) {
    std::vector<double> t(m.size());
    for (std::size_t i = 0; i < rows; ++i)
      for (std::size_t j = 0; j < cols; ++j) t[j * rows + i] = m[i * cols + j];
    m.swap(t);
    std::swap(rows, cols);
  }
  const double eps = std::numeric_limits<double>::epsilon();
  bool converged = cols < 2;
  for (int sweep = 0; sweep < max_sweeps && !converged; ++sweep) {
    converged = true;
    for (std::size_t p = 0; p + 1 < cols; ++p) {
      for (std::size_t q = p + 1; q < cols; ++q) {
        double alpha = 0.0, beta = 0.0, gamma = 0.0;
        for (std::size_t i = 0; i < rows; ++i) {
          const double x = m[i * cols + p], y = m[i * cols + q];
          alpha += x * x;
          beta += y * y;
          gamma += x * y;
        }
        if (gamma == 0.0 || std::abs(gamma) <= eps * std::sqrt(alpha * beta)) continue;
        converged = false;
        const double zeta = (beta - alpha) / (2.0 * gamma);
        const double tan = std::copysign(1.0, zeta) / (std::abs(zeta) + std::sqrt(1.0 + zeta * zeta));
        const double c = 1.0 / std::sqrt(1.0 + tan * tan);
        const double s = c * tan;
        for (std::size_t i = 0; i < rows; ++i) {
          const double x = m[i * cols + p], y = m[i * cols + q];
          m[i * cols + p] = c * x - s * y;
          m[i * cols + q] = s * x + c * y;
        }
      }
    }
  }
  if (!converged) {
    throw NumericError("one-sided Jacobi did not converge for " + label + " after " + std::to_string(max_sweeps) +
                       " sweeps");
  }
  std::vector<double> sv(cols);
  for (std::size_t j = 0; j < cols; ++j) {
    double n = 0.0;
    for (std::size_t i = 0; i < rows; ++i) n += m[i * cols + j] * m[i * cols + j];
    sv[j] = std::sqrt(n);
  }
  std::sort(sv.begin(), sv.end(), std::greater<>());
  return sv;
}

namespace {

// R factor (r x r, row-major) of the thin Householder QR of a row-major n x r matrix.
std::vector<double> thin_qr_r(std::vector<double> x, std::size_t n, std::size_t r) {
  for (std::size_t k = 0; k < r; ++k) {
    double norm = 0.0;
    for (std::size_t i = k; i < n; ++i) norm += x[i * r + k] * x[i * r + k];
    norm = std::sqrt(norm);
    if (norm == 0.0) continue;
    const double alpha = x[k * r + k] > 0 ? -norm : norm;
    std::vector<double> v(n - k);
    for (std::size_t i = k; i < n; ++i) v[i - k] = x[i * r + k];
    v[0] -= alpha;
    double vv = 0.0;
    for (double e : v) vv += e * e;
    if (vv == 0.0) continue;
    for (std::size_t j = k; j < r; ++j) {
      double dot = 0.0;
      for (std::size_t i = k; i < n; ++i) dot += v[i - k] * x[i * r + j];
      const double f = 2.0 * dot / vv;
      for (std::size_t i = k; i < n; ++i) x[i * r + j] -= f * v[i - k];
    }
  }
  std::vector<double> rr(r * r, 0.0);
  for (std::size_t i = 0; i < r; ++i)
    for (std::size_t j = i; j < r; ++j) rr[i * r + j] = x[i * r + j];
  return rr;
}

}  // namespace

std::vector<double> lowrank_singular_values(std::span<const double> a, std::span<const double> b, std::size_t in,
                                            std::size_t r, std::size_t out, double s, const std::string& label) {
  if (a.size() != in * r || b.size() != r * out) throw DimensionError("lowrank_singular_values: factor sizes disagree");
  if (r > in || r > out) throw ContractError("lowrank_singular_values: rank exceeds a factor dimension");
  const std::vector<double> ra = thin_qr_r(std::vector<double>(a.begin(), a.end()), in, r);
  std::vector<double> bt(out * r);
  for (std::size_t k = 0; k < r; ++k)
    for (std::size_t j = 0; j < out; ++j) bt[j * r + k] = b[k * out + j];
  const std::vector<double> rb = thin_qr_r(std::move(bt), out, r);
  // A B = Q_A (R_A R_B^T) Q_B^T
  std::vector<double> core(r * r, 0.0);
  for (std::size_t i = 0; i < r; ++i)
    for (std::size_t j = 0; j < r; ++j) {
      double acc = 0.0;
      for (std::size_t k = 0; k < r; ++k) acc += ra[i * r + k] * rb[j * r + k];
      core[i * r + j] = s * acc;
    }
  return jacobi_singular_values(std::move(core), r, r, label);
}

std::size_t effective_rank(const std::vector<double>& values, double energy) {
  double total = 0.0;
  for (double v : values) total += v * v;
  if (total == 0.0) return 0;
  double acc = 0.0;
  for (std::size_t k = 0; k < values.size(); ++k) {
    acc += values[k] * values[k];
    if (acc >= energy * total) return k + 1;
  }
  return values.size();
}

double decay_slope(const std::vector<double>& values) {
  if (values.empty() || values.front() == 0.0) return 0.0;
  std::vector<double> xs, ys;
  for (std::size_t k = 0; k < values.size(); ++k) {
    if (values[k] > values.front() * 1e-12) {
      xs.push_back(static_cast<double>(k));
      ys.push_back(std::log10(values[k]));
    }
  }
  if (xs.size() < 2) return 0.0;
  const double n = static_cast<double>(xs.size());
  double mx = 0.0, my = 0.0;
  for (std::size_t i = 0; i < xs.size(); ++i) mx += xs[i], my += ys[i];
  mx /= n;
  my /= n;
  double sxy = 0.0, sxx = 0.0;
  for (std::size_t i = 0; i < xs.size(); ++i) {
    sxy += (xs[i] - mx) * (ys[i] - my);
    sxx += (xs[i] - mx) * (xs[i] - mx);
  }
  return sxy / sxx;
}

void SpectrumReport::write_csv(std::ostream& os) const {
  os << "schema_version,layer,module,eff_rank_90,eff_rank_99,decay_slope";
  for (std::size_t k = 0; k < rank; ++k) os << ",sv_" << k;
  os << "\n";
  for (const LayerSpectrum& l : layers) {
    os << kAuditSchemaVersion << "," << l.layer << "," << module_name(l.module) << "," << l.eff_rank_90 << ","
       << l.eff_rank_99 << "," << fmt17(l.decay_slope);
    for (double v : l.values) os << "," << fmt17(v);
    os << "\n";
  }
}

nlohmann::json SpectrumReport::to_json() const {
  nlohmann::json rows = nlohmann::json::array();
  for (const LayerSpectrum& l : layers) {
    rows.push_back({{"layer", l.layer},
                    {"module", std::string(module_name(l.module))},
                    {"singular_values", l.values},
                    {"eff_rank_90", l.eff_rank_90},
                    {"eff_rank_99", l.eff_rank_99},
                    {"decay_slope", l.decay_slope}});
  }
  return {{"schema_version", kAuditSchemaVersion}, {"scheme", scheme}, {"rank", rank}, {"layers", rows}};
}

SpectrumReport svd_spectrum(const TinyTransformer& model) {
  if (!model.scheme().is_adapter_mode()) throw ContractError("svd_spectrum: full fine-tune has no low-rank update");
  SpectrumReport report;
  report.scheme = model.scheme().label();
  report.rank = static_cast<std::size_t>(model.scheme().rank);
  for (const LayerAdapter& la : model.adapter_set().adapters) {
    const AdaptedLinear& lin = model.linear(la.layer_index, la.module_type);
    LayerSpectrum ls;
    ls.layer = la.layer_index;
    ls.module = la.module_type;
    const std::string label = "layer " + std::to_string(la.layer_index) + " " + std::string(module_name(la.module_type));
    ls.values = lowrank_singular_values(la.a.data(), la.b.data(), lin.in_dim(), report.rank, lin.out_dim(), lin.scale,
                                        label);
    ls.eff_rank_90 = effective_rank(ls.values, 0.90);
    ls.eff_rank_99 = effective_rank(ls.values, 0.99);
    ls.decay_slope = decay_slope(ls.values);
    report.layers.push_back(std::move(ls));
  }
  return report;
}

// ---- gradient check ----

nlohmann::json GradcheckReport::to_json() const {
  nlohmann::json ps = nlohmann::json::array();
  for (const ParamCheck& p : params) {
    ps.push_back({{"name", p.name}, {"size", p.size}, {"max_rel_err", p.max_rel_err}, {"max_abs_err", p.max_abs_err}});
  }
  return {{"schema_version", kAuditSchemaVersion},
          {"scheme", scheme},
          {"max_rel_err", max_rel_err},
          {"tolerance", tolerance},
          {"passed", passed},
          {"params", ps}};
}

GradcheckReport gradcheck(TinyTransformer& model, const Batch& sample, const GradcheckOptions& options) {
  std::vector<NamedTensor> params = model.trainable_parameters();
  for (NamedTensor& p : params) p.tensor.zero_grad();
  model.loss(sample.tokens, sample.targets).backward();

  GradcheckReport report;
  report.scheme = model.scheme().label();
  report.tolerance = options.tolerance;
  NoGradGuard no_grad;
  auto eval = [&] { return model.loss(sample.tokens, sample.targets).item(); };
  for (NamedTensor& p : params) {
    ParamCheck check;
    check.name = p.name;
    check.size = p.tensor.numel();
    const std::vector<double> analytic(p.tensor.grad().begin(), p.tensor.grad().end());
    auto data = p.tensor.mutable_data();
    for (std::size_t i = 0; i < data.size(); ++i) {
      const double saved = data[i];
      data[i] = saved + options.step;
      const double up = eval();
      data[i] = saved - options.step;
      const double down = eval();
      data[i] = saved;
      const double numeric = (up - down) / (2.0 * options.step);
      const double abs_err = std::abs(analytic[i] - numeric);
      const double denom = std::max({std::abs(analytic[i]), std::abs(numeric), options.floor});
      check.max_abs_err = std::max(check.max_abs_err, abs_err);
      check.max_rel_err = std::max(check.max_rel_err, abs_err / denom);
    }
    p.tensor.zero_grad();
    report.max_rel_err = std::max(report.max_rel_err, check.max_rel_err);
    report.params.push_back(std::move(check));
  }
  report.passed = report.max_rel_err < options.tolerance;
  return report;
}

void randomize_adapter_b(TinyTransformer& model, std::uint64_t seed, double stddev) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> n(0.0, stddev);
  for (NamedTensor& p : model.trainable_parameters()) {
    if (p.name.size() < 2 || p.name.compare(p.name.size() - 2, 2, ".B") != 0) continue;
    for (double& v : p.tensor.mutable_data()) v = n(rng);
  }
}

}  // namespace sharelora

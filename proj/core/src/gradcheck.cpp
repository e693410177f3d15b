#include "expnet/gradcheck.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <random>

#include "expnet/errors.hpp"
#include "expnet/training.hpp"

namespace expnet {

double relative_error(double analytic, double numeric, double floor) {
  const double denom = std::max({std::abs(analytic), std::abs(numeric), floor});
  return std::abs(analytic - numeric) / denom;
}

GradCheckReport check_gradients(const std::function<Tensor()>& loss, const std::vector<NamedTensor>& params,
                                const GradCheckOptions& options) {
  const auto started = std::chrono::steady_clock::now();
  for (auto p : params) p.tensor.zero_grad();
  backward(loss());
  GradCheckReport report;
  for (const auto& nt : params) {
    Tensor p = nt.tensor;
    if (!p.requires_grad()) throw ContractError("gradient check on " + nt.name + ", which does not require grad");
    std::vector<double> analytic(p.numel(), 0.0);
    if (p.has_grad()) std::copy(p.grad().begin(), p.grad().end(), analytic.begin());

    ParameterCheck check{nt.name, p.numel(), 0.0, 0.0};
    auto w = p.mutable_data();
    for (std::size_t i = 0; i < w.size(); ++i) {
      const double original = w[i];
      double plus = 0.0, minus = 0.0;
      {
        NoGradGuard no_grad;
        w[i] = original + options.step;
        plus = loss().item();
        w[i] = original - options.step;
        minus = loss().item();
      }
      w[i] = original;
      const double numeric = (plus - minus) / (2.0 * options.step);
      check.max_rel_error = std::max(check.max_rel_error, relative_error(analytic[i], numeric, options.floor));
      check.max_abs_error = std::max(check.max_abs_error, std::abs(analytic[i] - numeric));
    }
    report.max_rel_error = std::max(report.max_rel_error, check.max_rel_error);
    report.parameters.push_back(std::move(check));
  }
  report.passed = report.max_rel_error < options.tolerance;
  report.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - started).count();
  return report;
}

ModelConfig tiny_model_config() {
  ModelConfig c;
  c.d_model = 8;
  c.d_ff = 16;
  c.n_enc_layers = 1;
  c.n_dec_layers = 1;
  c.enc_mode = {ExpansionKind::Static, 2};
  c.dec_n_e = 2;
  c.n_heads = 2;
  c.vocab_size = 7;
  c.max_seq_len = 4;
  c.d_feature = 6;
  return c;
}

GradCheckReport check_model_gradients(const ModelConfig& config, const GradCheckOptions& options) {
  if (options.seq_len == 0 || options.seq_len > config.max_seq_len) {
    throw ConfigError("gradient check sequence length must be in 1..max_seq_len");
  }
  if (options.n_regions == 0) throw ConfigError("gradient check needs at least one feature row");
  CaptionModel model(config, options.seed);
  std::mt19937_64 rng(options.seed + 1);
  std::normal_distribution<double> normal(0.0, 1.0);
  std::vector<double> feat(options.n_regions * config.d_feature);
  for (auto& v : feat) v = normal(rng);
  const Tensor features({options.n_regions, config.d_feature}, std::move(feat));
  std::uniform_int_distribution<int> token(kSos, static_cast<int>(config.vocab_size) - 1);
  TokenSequence input{kSos}, target;
  for (std::size_t t = 1; t < options.seq_len; ++t) input.push_back(token(rng));
  for (std::size_t t = 0; t < options.seq_len; ++t) target.push_back(t + 1 < options.seq_len ? input[t + 1] : token(rng));

  auto loss = [&] { return xe_loss(model.decode_logits(input, model.encode(features)), target); };
  return check_gradients(loss, model.named_parameters(), options);
}

}  // namespace expnet

#include "metagrad/meta_params.hpp"

#include <cmath>
#include <string>

#include "metagrad/common.hpp"

namespace metagrad {

MetaParams MetaParams::scalar(double gamma_logit, double lambda_logit, bool adapt_gamma, bool adapt_lambda) {
  MetaParams mp;
  mp.gamma_logits = {clamp_logit(gamma_logit)};
  mp.lambda_logits = {clamp_logit(lambda_logit)};
  mp.adapt_gamma = adapt_gamma;
  mp.adapt_lambda = adapt_lambda;
  mp.state_dependent = false;
  return mp;
}

MetaParams MetaParams::per_state(std::size_t num_states, double gamma_logit, double lambda_logit, bool adapt_gamma,
                                 bool adapt_lambda) {
  if (num_states == 0) throw Error("state-dependent meta-parameters need at least one state");
  MetaParams mp;
  mp.gamma_logits.assign(num_states, clamp_logit(gamma_logit));
  mp.lambda_logits.assign(num_states, clamp_logit(lambda_logit));
  mp.adapt_gamma = adapt_gamma;
  mp.adapt_lambda = adapt_lambda;
  mp.state_dependent = true;
  return mp;
}

std::size_t MetaParams::active_dim() const {
  return (adapt_gamma ? gamma_logits.size() : 0) + (adapt_lambda ? lambda_logits.size() : 0);
}

std::optional<std::size_t> MetaParams::gamma_column(std::size_t slot) const {
  if (!adapt_gamma) return std::nullopt;
  return slot;
}

std::optional<std::size_t> MetaParams::lambda_column(std::size_t slot) const {
  if (!adapt_lambda) return std::nullopt;
  return (adapt_gamma ? gamma_logits.size() : 0) + slot;
}

double MetaParams::gamma(std::size_t slot) const { return sigmoid(gamma_logits.at(slot)); }
double MetaParams::lambda(std::size_t slot) const { return sigmoid(lambda_logits.at(slot)); }

MetaTrace MetaTrace::zeros(std::size_t theta_dim, std::size_t eta_dim, double mu) {
  if (!(mu >= 0.0 && mu <= 1.0)) throw Error("trace decay mu must lie in [0,1]");
  return MetaTrace{Eigen::MatrixXd::Zero(static_cast<Eigen::Index>(theta_dim), static_cast<Eigen::Index>(eta_dim)),
                   mu};
}

MetaOptimizerState MetaOptimizerState::make(MetaOptimizerKind kind, double beta, std::size_t eta_dim) {
  MetaOptimizerState s;
  s.kind = kind;
  s.beta = beta;
  s.first_moment = Eigen::VectorXd::Zero(static_cast<Eigen::Index>(eta_dim));
  s.second_moment = Eigen::VectorXd::Zero(static_cast<Eigen::Index>(eta_dim));
  return s;
}

namespace {

EtaView make_view(const MetaParams& mp, bool mask_frozen) {
  const std::size_t n = mp.num_slots();
  if (n == 0 || mp.lambda_logits.size() != n) throw Error("meta-parameter tables are empty or mismatched");
  std::vector<double> g(n), l(n), dg(n), dl(n);
  for (std::size_t i = 0; i < n; ++i) {
    g[i] = sigmoid(mp.gamma_logits[i]);
    l[i] = sigmoid(mp.lambda_logits[i]);
    dg[i] = (mask_frozen && !mp.adapt_gamma) ? 0.0 : g[i] * (1.0 - g[i]);
    dl[i] = (mask_frozen && !mp.adapt_lambda) ? 0.0 : l[i] * (1.0 - l[i]);
  }
  if (!mp.state_dependent) return EtaView::scalar(g[0], l[0], dg[0], dl[0]);
  return EtaView::per_state(std::move(g), std::move(l), std::move(dg), std::move(dl));
}

}  // namespace

EtaView eta_view(const MetaParams& mp) { return make_view(mp, false); }

EtaView active_eta_view(const MetaParams& mp) { return make_view(mp, true); }

MetaTrace trace_update(const MetaTrace& z, const Eigen::MatrixXd& df_deta) {
  if (z.entries.rows() != df_deta.rows() || z.entries.cols() != df_deta.cols()) {
    throw Error("trace shape " + std::to_string(z.entries.rows()) + "x" + std::to_string(z.entries.cols()) +
                " does not match update gradient " + std::to_string(df_deta.rows()) + "x" +
                std::to_string(df_deta.cols()));
  }
  MetaTrace out;
  out.mu = z.mu;
  if (z.mu == 0.0) {
    out.entries = df_deta;
  } else {
    out.entries = z.mu * z.entries + df_deta;
  }
  return out;
}

Eigen::VectorXd meta_gradient(const Eigen::VectorXd& dJ_dtheta, const MetaTrace& z) {
  if (dJ_dtheta.size() != z.entries.rows()) {
    throw Error("meta-objective gradient has " + std::to_string(dJ_dtheta.size()) + " entries, trace has " +
                std::to_string(z.entries.rows()) + " rows");
  }
  return z.entries.transpose() * dJ_dtheta;
}

MetaParams apply_meta_gradient(const MetaParams& mp, MetaOptimizerState& opt, const Eigen::VectorXd& grad) {
  const auto dim = static_cast<Eigen::Index>(mp.active_dim());
  if (grad.size() != dim) {
    throw Error("meta-gradient has " + std::to_string(grad.size()) + " entries for " + std::to_string(dim) +
                " adapted logits");
  }
  for (Eigen::Index i = 0; i < dim; ++i) {
    if (!std::isfinite(grad[i])) throw Error("non-finite meta-gradient at component " + std::to_string(i));
  }
  if (opt.first_moment.size() != dim) {
    opt.first_moment = Eigen::VectorXd::Zero(dim);
    opt.second_moment = Eigen::VectorXd::Zero(dim);
  }

  Eigen::VectorXd delta(dim);
  if (opt.kind == MetaOptimizerKind::Sgd) {
    delta = -opt.beta * grad;
    ++opt.step;
  } else {
    ++opt.step;
    opt.first_moment = opt.beta1 * opt.first_moment + (1.0 - opt.beta1) * grad;
    opt.second_moment = opt.beta2 * opt.second_moment + (1.0 - opt.beta2) * grad.cwiseProduct(grad);
    const double c1 = 1.0 - std::pow(opt.beta1, static_cast<double>(opt.step));
    const double c2 = 1.0 - std::pow(opt.beta2, static_cast<double>(opt.step));
    for (Eigen::Index i = 0; i < dim; ++i) {
      const double m_hat = opt.first_moment[i] / c1;
      const double v_hat = opt.second_moment[i] / c2;
      delta[i] = -opt.beta * m_hat / (std::sqrt(v_hat) + opt.epsilon);
    }
  }

  MetaParams out = mp;
  for (std::size_t s = 0; s < mp.num_slots(); ++s) {
    if (auto col = mp.gamma_column(s)) {
      out.gamma_logits[s] = clamp_logit(mp.gamma_logits[s] + delta[static_cast<Eigen::Index>(*col)]);
    }
    if (auto col = mp.lambda_column(s)) {
      out.lambda_logits[s] = clamp_logit(mp.lambda_logits[s] + delta[static_cast<Eigen::Index>(*col)]);
    }
  }
  for (std::size_t s = 0; s < out.num_slots(); ++s) {
    if (!std::isfinite(out.gamma_logits[s]) || !std::isfinite(out.lambda_logits[s])) {
      throw Error("meta step produced a non-finite logit at slot " + std::to_string(s));
    }
  }
  return out;
}

MetaParams meta_step(const MetaParams& mp, MetaOptimizerState& opt, const Eigen::VectorXd& dJ_dtheta,
                     const MetaTrace& z) {
  return apply_meta_gradient(mp, opt, meta_gradient(dJ_dtheta, z));
}

Eigen::MatrixXd exact_forward_accumulation(const std::vector<InnerStepJacobians>& history, std::size_t theta_dim,
                                           std::size_t eta_dim, std::size_t dim_cap) {
  if (theta_dim > dim_cap) {
    throw Error("exact accumulation needs a " + std::to_string(theta_dim) + "-square Jacobian, above the cap of " +
                std::to_string(dim_cap));
  }
  const auto n = static_cast<Eigen::Index>(theta_dim);
  const auto m = static_cast<Eigen::Index>(eta_dim);
  Eigen::MatrixXd dtheta = Eigen::MatrixXd::Zero(n, m);
  for (std::size_t k = 0; k < history.size(); ++k) {
    const auto& step = history[k];
    if (step.df_dtheta.rows() != n || step.df_dtheta.cols() != n || step.df_deta.rows() != n ||
        step.df_deta.cols() != m) {
      throw Error("inner update " + std::to_string(k) + " has Jacobians of the wrong shape");
    }
    dtheta = dtheta + step.df_dtheta * dtheta + step.df_deta;
  }
  return dtheta;
}

}  // namespace metagrad

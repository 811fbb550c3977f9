#include "metagrad/experiment.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <set>
#include <sstream>

#include "metagrad/common.hpp"

namespace metagrad {

namespace {

struct KeyDefault {
  const char* key;
  const char* value;
};

// Table order is also the serialization order.
const std::vector<KeyDefault>& defaults() {
  static const std::vector<KeyDefault> table = {
      {"env", "signal_noise"},
      {"env_file", ""},
      {"algorithm", "auto"},
      {"adapt", "gamma"},
      {"state_dependent", "true"},
      {"conditioning", "false"},
      {"gamma_prime", "1"},
      {"lambda_prime", "1"},
      {"gamma_logit_init", "0"},
      {"lambda_logit_init", "0"},
      {"seeds", "0-9"},
      {"iterations", "50000"},
      {"alpha", "0.1"},
      {"beta", "0.001"},
      {"mu", "0"},
      {"value_coef", "0.5"},
      {"entropy_coef", "0.01"},
      {"returns", "auto"},
      {"segment_length", "0"},
      {"meta_batch_size", "8"},
      {"batch_size", "8"},
      {"embedding_size", "16"},
      {"fan_width", "5"},
      {"episode_cap", "50"},
      {"meta_optimizer", "adam"},
      {"validation_conditioning", "eta_prime"},
      {"num_actors", "1"},
      {"snapshot_lag", "0"},
      {"log_every", "100"},
      {"workers", "1"},
      {"divergence_threshold", "1e6"},
      {"debug_gradcheck", "false"},
      {"checkpoint_every", "0"},
      {"checkpoint_dir", ""},
      {"sweep_gamma", "0.1,0.3,0.5,0.7,0.9"},
      {"sweep_lambda", ""},
  };
  return table;
}

std::map<std::string, std::string> preset(const std::string& command, const std::string& env) {
  if (env == "signal_noise") {
    return {{"adapt", "gamma"}, {"state_dependent", "true"}, {"lambda_logit_init", "20"},
            {"sweep_lambda", "0.1,0.3,0.5,0.7,0.9"}};
  }
  if (env == "fan") {
    return {{"adapt", "lambda"}, {"state_dependent", "true"}, {"gamma_logit_init", "20"},
            {"sweep_lambda", "0.1,0.3,0.5,0.7,0.9"}};
  }
  if (env == "gridworld") {
    return {{"adapt", "gamma"},    {"state_dependent", "false"}, {"lambda_logit_init", "20"},
            {"alpha", "0.01"},     {"segment_length", "20"},     {"iterations", "20000"}};
  }
  (void)command;
  return {};
}

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

std::vector<std::string> split_list(const std::string& text) {
  std::vector<std::string> out;
  std::stringstream ss(text);
  std::string item;
  while (std::getline(ss, item, ',')) {
    item = trim(item);
    if (!item.empty()) out.push_back(item);
  }
  return out;
}

[[noreturn]] void bad_value(const std::string& key, const std::string& value, const char* expected) {
  throw ConfigError("config key '" + key + "': expected " + expected + ", got '" + value + "'");
}

double parse_real(const std::string& key, const std::string& text) {
  try {
    std::size_t used = 0;
    const double v = std::stod(text, &used);
    if (used != text.size() || !std::isfinite(v)) bad_value(key, text, "a finite number");
    return v;
  } catch (const std::logic_error&) {
    bad_value(key, text, "a finite number");
  }
}

}  // namespace

ExperimentConfig::ExperimentConfig() {
  for (const auto& kd : defaults()) values_[kd.key] = kd.value;
}

const std::vector<std::string>& ExperimentConfig::keys() {
  static const std::vector<std::string> out = [] {
    std::vector<std::string> k;
    for (const auto& kd : defaults()) k.emplace_back(kd.key);
    return k;
  }();
  return out;
}

bool ExperimentConfig::known(const std::string& key) {
  const auto& k = keys();
  return std::find(k.begin(), k.end(), key) != k.end();
}

std::map<std::string, std::string> ExperimentConfig::parse(const std::string& text) {
  std::map<std::string, std::string> out;
  std::stringstream ss(text);
  std::string line;
  int lineno = 0;
  while (std::getline(ss, line)) {
    ++lineno;
    if (const auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
    line = trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw ConfigError("config line " + std::to_string(lineno) + ": expected key = value");
    const std::string key = trim(line.substr(0, eq));
    if (!known(key)) throw ConfigError("unknown config key '" + key + "'");
    out[key] = trim(line.substr(eq + 1));
  }
  return out;
}

std::map<std::string, std::string> ExperimentConfig::parse_file(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw ConfigError("cannot read config file " + path);
  std::stringstream ss;
  ss << is.rdbuf();
  return parse(ss.str());
}

ExperimentConfig ExperimentConfig::resolve(const std::string& command,
                                           const std::map<std::string, std::string>& overrides) {
  ExperimentConfig cfg;
  std::string env = cfg.get("env");
  if (auto it = overrides.find("env"); it != overrides.end()) env = it->second;
  if (command == "control" && overrides.find("env") == overrides.end()) env = "gridworld";
  cfg.set("env", env);
  for (const auto& [k, v] : preset(command, env)) cfg.set(k, v);
  for (const auto& [k, v] : overrides) cfg.set(k, v);
  return cfg;
}

void ExperimentConfig::set(const std::string& key, const std::string& value) {
  if (!known(key)) throw ConfigError("unknown config key '" + key + "'");
  values_[key] = value;
}

const std::string& ExperimentConfig::get(const std::string& key) const {
  const auto it = values_.find(key);
  if (it == values_.end()) throw ConfigError("unknown config key '" + key + "'");
  return it->second;
}

double ExperimentConfig::real(const std::string& key) const { return parse_real(key, get(key)); }

std::size_t ExperimentConfig::count(const std::string& key) const {
  const std::string& text = get(key);
  if (text.empty() || text.find_first_not_of("0123456789") != std::string::npos) {
    bad_value(key, text, "a non-negative integer");
  }
  try {
    return static_cast<std::size_t>(std::stoull(text));
  } catch (const std::out_of_range&) {
    bad_value(key, text, "a non-negative integer");
  }
}

bool ExperimentConfig::flag(const std::string& key) const {
  const std::string& text = get(key);
  if (text == "true" || text == "1" || text == "yes") return true;
  if (text == "false" || text == "0" || text == "no") return false;
  bad_value(key, text, "true or false");
}

std::vector<double> ExperimentConfig::reals(const std::string& key) const {
  std::vector<double> out;
  for (const auto& item : split_list(get(key))) out.push_back(parse_real(key, item));
  return out;
}

std::vector<std::uint64_t> ExperimentConfig::seeds() const {
  try {
    return parse_seed_list(get("seeds"));
  } catch (const Error& e) {
    throw ConfigError(std::string("config key 'seeds': ") + e.what());
  }
}

std::string ExperimentConfig::serialize() const {
  std::string out;
  for (const auto& k : keys()) out += k + " = " + values_.at(k) + "\n";
  return out;
}

MrpSpec ExperimentConfig::mrp() const {
  const std::string& env = get("env");
  if (env == "signal_noise") return build_signal_noise_mrp();
  if (env == "fan") {
    const std::size_t w = count("fan_width");
    if (w < 2) bad_value("fan_width", get("fan_width"), "an integer of at least 2");
    return build_fan_mrp(static_cast<int>(w));
  }
  if (env == "file") {
    if (get("env_file").empty()) throw ConfigError("config key 'env_file': required when env = file");
    return load_mrp_table(get("env_file"));
  }
  if (env == "gridworld") throw ConfigError("config key 'env': gridworld is a control environment");
  bad_value("env", env, "signal_noise, fan, file or gridworld");
}

MdpSpec ExperimentConfig::mdp() const {
  const std::string& env = get("env");
  if (env != "gridworld") throw ConfigError("config key 'env': control runs need env = gridworld, got '" + env + "'");
  MdpSpec spec = build_noisy_gridworld();
  spec.episode_cap = count("episode_cap");
  if (spec.episode_cap == 0) bad_value("episode_cap", get("episode_cap"), "a positive integer");
  return spec;
}

namespace {

MetaSettings meta_settings(const ExperimentConfig& c) {
  MetaSettings m;
  const std::string& adapt = c.get("adapt");
  if (adapt == "gamma") {
    m.adapt_gamma = true;
  } else if (adapt == "lambda") {
    m.adapt_lambda = true;
  } else if (adapt == "both") {
    m.adapt_gamma = m.adapt_lambda = true;
  } else if (adapt != "none") {
    bad_value("adapt", adapt, "gamma, lambda, both or none");
  }
  m.state_dependent = c.flag("state_dependent");
  m.gamma_logit_init = c.real("gamma_logit_init");
  m.lambda_logit_init = c.real("lambda_logit_init");
  m.beta = c.real("beta");
  if (!(m.beta > 0.0)) bad_value("beta", c.get("beta"), "a positive number");
  m.mu = c.real("mu");
  if (!(m.mu >= 0.0 && m.mu <= 1.0)) bad_value("mu", c.get("mu"), "a number in [0,1]");
  const std::string& opt = c.get("meta_optimizer");
  if (opt == "adam") {
    m.optimizer = MetaOptimizerKind::Adam;
  } else if (opt == "sgd") {
    m.optimizer = MetaOptimizerKind::Sgd;
  } else {
    bad_value("meta_optimizer", opt, "adam or sgd");
  }
  m.validation.gamma_prime = c.real("gamma_prime");
  m.validation.lambda_prime = c.real("lambda_prime");
  if (!(m.validation.gamma_prime > 0.0 && m.validation.gamma_prime <= 1.0)) {
    bad_value("gamma_prime", c.get("gamma_prime"), "a number in (0,1]");
  }
  if (!(m.validation.lambda_prime > 0.0 && m.validation.lambda_prime <= 1.0)) {
    bad_value("lambda_prime", c.get("lambda_prime"), "a number in (0,1]");
  }
  m.validation.meta_batch_size = c.count("meta_batch_size");
  if (m.validation.meta_batch_size == 0) bad_value("meta_batch_size", "0", "a positive integer");
  const std::string& vc = c.get("validation_conditioning");
  if (vc == "eta_prime") {
    m.validation.conditioning = ValidationConditioning::EtaPrime;
  } else if (vc == "eta") {
    m.validation.conditioning = ValidationConditioning::Eta;
  } else {
    bad_value("validation_conditioning", vc, "eta_prime or eta");
  }
  return m;
}

RunSettings run_settings(const ExperimentConfig& c, std::uint64_t seed) {
  RunSettings r;
  r.seed = seed;
  r.iterations = c.count("iterations");
  r.log_every = c.count("log_every");
  if (r.log_every == 0) bad_value("log_every", "0", "a positive integer");
  r.divergence_threshold = c.real("divergence_threshold");
  r.debug_gradcheck = c.flag("debug_gradcheck");
  r.checkpoint_every = c.count("checkpoint_every");
  r.checkpoint_dir = c.get("checkpoint_dir");
  return r;
}

double positive(const ExperimentConfig& c, const std::string& key) {
  const double v = c.real(key);
  if (!(v > 0.0)) bad_value(key, c.get(key), "a positive number");
  return v;
}

}  // namespace

PredictionConfig ExperimentConfig::prediction(std::uint64_t seed) const {
  PredictionConfig p;
  p.env = mrp();
  p.alpha = positive(*this, "alpha");
  p.segment_length = count("segment_length");
  p.conditioning = flag("conditioning");
  p.embedding_size = count("embedding_size");
  p.meta = meta_settings(*this);
  p.run = run_settings(*this, seed);
  return p;
}

ControlConfig ExperimentConfig::control(std::uint64_t seed) const {
  ControlConfig p;
  p.env = mdp();
  p.a2c.alpha = positive(*this, "alpha");
  p.a2c.value_coef = real("value_coef");
  p.a2c.entropy_coef = real("entropy_coef");
  const std::string& ret = get("returns");
  if (ret == "auto") {
    p.a2c.returns = ReturnKind::Auto;
  } else if (ret == "lambda") {
    p.a2c.returns = ReturnKind::Lambda;
  } else if (ret == "vtrace") {
    p.a2c.returns = ReturnKind::VTrace;
  } else {
    bad_value("returns", ret, "auto, lambda or vtrace");
  }
  p.segment_length = count("segment_length");
  if (p.segment_length == 0) bad_value("segment_length", "0", "a positive integer for control runs");
  p.batch_size = count("batch_size");
  if (p.batch_size == 0) bad_value("batch_size", "0", "a positive integer");
  p.num_actors = count("num_actors");
  if (p.num_actors == 0) bad_value("num_actors", "0", "a positive integer");
  p.snapshot_lag = count("snapshot_lag");
  p.conditioning = flag("conditioning");
  p.embedding_size = count("embedding_size");
  p.meta = meta_settings(*this);
  p.run = run_settings(*this, seed);
  return p;
}

std::vector<std::uint64_t> parse_seed_list(const std::string& text) {
  std::vector<std::uint64_t> out;
  for (const auto& item : split_list(text)) {
    const auto dash = item.find('-');
    auto num = [&](const std::string& s) -> std::uint64_t {
      if (s.empty() || s.find_first_not_of("0123456789") != std::string::npos) {
        throw ConfigError("bad seed '" + s + "' in '" + text + "'");
      }
      return std::stoull(s);
    };
    if (dash == std::string::npos) {
      out.push_back(num(item));
    } else {
      const std::uint64_t lo = num(trim(item.substr(0, dash)));
      const std::uint64_t hi = num(trim(item.substr(dash + 1)));
      if (hi < lo) throw ConfigError("empty seed range '" + item + "'");
      for (std::uint64_t s = lo; s <= hi; ++s) out.push_back(s);
    }
  }
  if (out.empty()) throw ConfigError("seed list is empty");
  std::set<std::uint64_t> seen;
  for (auto s : out) {
    if (!seen.insert(s).second) throw ConfigError("seed " + std::to_string(s) + " listed twice");
  }
  return out;
}

double quantile(std::vector<double> data, double p) {
  if (data.empty()) throw Error("quantile of empty data");
  if (!(p >= 0.0 && p <= 1.0)) throw Error("quantile level outside [0,1]");
  std::sort(data.begin(), data.end());
  const double h = (static_cast<double>(data.size()) - 1.0) * p;
  const auto lo = static_cast<std::size_t>(std::floor(h));
  const std::size_t hi = std::min(lo + 1, data.size() - 1);
  return data[lo] + (h - static_cast<double>(lo)) * (data[hi] - data[lo]);
}

std::string exact(double x) {
  char buf[40];
  const auto res = std::to_chars(buf, buf + sizeof buf, x);
  return std::string(buf, res.ptr);
}

std::vector<SeedRun> run_experiment(const ExperimentConfig& cfg, const std::string& command) {
  if (command != "predict" && command != "control") throw Error("unknown experiment command '" + command + "'");
  std::vector<std::uint64_t> seeds = cfg.seeds();
  std::sort(seeds.begin(), seeds.end());
  // Validate everything once up front so bad keys fail before any work starts.
  if (command == "predict") {
    (void)cfg.prediction(seeds.front());
  } else {
    (void)cfg.control(seeds.front());
  }
  return run_pool<SeedRun>(seeds.size(), cfg.count("workers"), [&](std::size_t i) {
    SeedRun run;
    run.seed = seeds[i];
    run.log = command == "predict" ? run_meta_prediction(cfg.prediction(seeds[i]))
                                   : run_meta_control(cfg.control(seeds[i]));
    return run;
  });
}

void write_runlog_csv(std::ostream& os, const std::vector<SeedRun>& runs) {
  std::size_t slots = 0;
  bool scalar = true;
  for (const auto& r : runs) {
    slots = std::max(slots, r.log.final_eta.num_slots());
    scalar = scalar && !r.log.final_eta.state_dependent;
  }
  os << "seed,iter,metric";
  if (scalar) {
    os << ",gamma,lambda";
  } else {
    for (std::size_t s = 0; s < slots; ++s) os << ",gamma_s" << s;
    for (std::size_t s = 0; s < slots; ++s) os << ",lambda_s" << s;
  }
  os << '\n';
  for (const auto& r : runs) {
    for (const auto& row : r.log.rows) {
      os << r.seed << ',' << row.iter << ',' << exact(row.metric);
      for (double g : row.gammas) os << ',' << exact(g);
      for (double l : row.lambdas) os << ',' << exact(l);
      os << '\n';
    }
  }
}

void write_final_eta_csv(std::ostream& os, const std::vector<SeedRun>& runs) {
  os << "seed,state,gamma,lambda\n";
  for (const auto& r : runs) {
    const MetaParams& mp = r.log.final_eta;
    for (std::size_t s = 0; s < mp.num_slots(); ++s) {
      os << r.seed << ',' << s << ',' << exact(mp.gamma(s)) << ',' << exact(mp.lambda(s)) << '\n';
    }
  }
}

void write_status_csv(std::ostream& os, const std::vector<SeedRun>& runs) {
  os << "seed,status,reason\n";
  for (const auto& r : runs) {
    std::string reason = r.log.abort_reason;
    std::replace(reason.begin(), reason.end(), '"', '\'');
    os << r.seed << ',' << (r.log.aborted ? "aborted" : "ok") << ",\"" << reason << "\"\n";
  }
}

namespace {

struct Band {
  std::vector<double> x, lo, mid, hi;
};

// Median and 20-80 band per logged row, over seeds that reached that row.
template <typename Pick>
Band band_over_seeds(const std::vector<SeedRun>& runs, Pick&& pick) {
  Band b;
  std::size_t longest = 0;
  for (const auto& r : runs) longest = std::max(longest, r.log.rows.size());
  for (std::size_t k = 0; k < longest; ++k) {
    std::vector<double> vals;
    double iter = 0.0;
    for (const auto& r : runs) {
      if (k >= r.log.rows.size()) continue;
      const double v = pick(r.log.rows[k]);
      if (!std::isfinite(v)) continue;
      vals.push_back(v);
      iter = static_cast<double>(r.log.rows[k].iter);
    }
    if (vals.empty()) continue;
    b.x.push_back(iter);
    b.lo.push_back(quantile(vals, 0.2));
    b.mid.push_back(quantile(vals, 0.5));
    b.hi.push_back(quantile(vals, 0.8));
  }
  return b;
}

std::string colour(std::size_t i, std::size_t n) {
  char buf[32];
  const double hue = 360.0 * static_cast<double>(i) / static_cast<double>(std::max<std::size_t>(n, 1));
  std::snprintf(buf, sizeof buf, "hsl(%.0f,65%%,45%%)", hue);
  return buf;
}

class SvgPanel {
public:
  SvgPanel(double x0, double y0, double w, double h, double xmax, double ymin, double ymax)
      : x0_(x0), y0_(y0), w_(w), h_(h), xmax_(xmax > 0 ? xmax : 1.0), ymin_(ymin), ymax_(ymax > ymin ? ymax : ymin + 1) {}

  double px(double x) const { return x0_ + w_ * x / xmax_; }
  double py(double y) const { return y0_ + h_ * (1.0 - (y - ymin_) / (ymax_ - ymin_)); }

  void frame(std::ostream& os, const std::string& label) const {
    char buf[512];
    std::snprintf(buf, sizeof buf,
                  "<rect x=\"%.1f\" y=\"%.1f\" width=\"%.1f\" height=\"%.1f\" fill=\"none\" stroke=\"#444\"/>\n"
                  "<text x=\"%.1f\" y=\"%.1f\" font-size=\"12\">%s</text>\n"
                  "<text x=\"%.1f\" y=\"%.1f\" font-size=\"10\" text-anchor=\"end\">%.3g</text>\n"
                  "<text x=\"%.1f\" y=\"%.1f\" font-size=\"10\" text-anchor=\"end\">%.3g</text>\n"
                  "<text x=\"%.1f\" y=\"%.1f\" font-size=\"10\" text-anchor=\"end\">%.0f</text>\n",
                  x0_, y0_, w_, h_, x0_, y0_ - 6, label.c_str(), x0_ - 4, y0_ + 10, ymax_, x0_ - 4, y0_ + h_,
                  ymin_, x0_ + w_, y0_ + h_ + 14, xmax_);
    os << buf;
  }

  void band(std::ostream& os, const Band& b, const std::string& col) const {
    if (b.x.empty()) return;
    os << "<polygon fill=\"" << col << "\" fill-opacity=\"0.2\" stroke=\"none\" points=\"";
    for (std::size_t i = 0; i < b.x.size(); ++i) point(os, b.x[i], b.hi[i]);
    for (std::size_t i = b.x.size(); i-- > 0;) point(os, b.x[i], b.lo[i]);
    os << "\"/>\n<polyline fill=\"none\" stroke=\"" << col << "\" stroke-width=\"1.5\" points=\"";
    for (std::size_t i = 0; i < b.x.size(); ++i) point(os, b.x[i], b.mid[i]);
    os << "\"/>\n";
  }

private:
  void point(std::ostream& os, double x, double y) const {
    char buf[48];
    std::snprintf(buf, sizeof buf, "%.2f,%.2f ", px(x), py(y));
    os << buf;
  }

  double x0_, y0_, w_, h_, xmax_, ymin_, ymax_;
};

double max_iter(const std::vector<Band>& bands) {
  double m = 0.0;
  for (const auto& b : bands) {
    if (!b.x.empty()) m = std::max(m, b.x.back());
  }
  return m;
}

void svg_open(std::ostream& os, double w, double h, const std::string& title) {
  os << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << w << "\" height=\"" << h << "\">\n"
     << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n"
     << "<text x=\"20\" y=\"20\" font-size=\"14\">" << title << "</text>\n";
}

}  // namespace

void write_eta_svg(std::ostream& os, const std::vector<SeedRun>& runs, const std::string& title) {
  std::size_t slots = 0;
  for (const auto& r : runs) slots = std::max(slots, r.log.final_eta.num_slots());
  std::vector<Band> gammas, lambdas;
  for (std::size_t s = 0; s < slots; ++s) {
    gammas.push_back(band_over_seeds(runs, [s](const LogRow& row) { return s < row.gammas.size() ? row.gammas[s] : NAN; }));
    lambdas.push_back(band_over_seeds(runs, [s](const LogRow& row) { return s < row.lambdas.size() ? row.lambdas[s] : NAN; }));
  }
  const double xmax = max_iter(gammas);
  svg_open(os, 760, 620, title);
  const SvgPanel top(60, 50, 660, 230, xmax, 0.0, 1.0);
  const SvgPanel bottom(60, 340, 660, 230, xmax, 0.0, 1.0);
  top.frame(os, "gamma per state (median, 20-80% band)");
  bottom.frame(os, "lambda per state (median, 20-80% band)");
  for (std::size_t s = 0; s < slots; ++s) {
    top.band(os, gammas[s], colour(s, slots));
    bottom.band(os, lambdas[s], colour(s, slots));
  }
  os << "<text x=\"390\" y=\"605\" font-size=\"11\" text-anchor=\"middle\">iteration</text>\n</svg>\n";
}

void write_metric_svg(std::ostream& os, const std::vector<SeedRun>& runs, const std::string& title,
                      const std::string& metric_label) {
  const Band b = band_over_seeds(runs, [](const LogRow& row) { return row.metric; });
  double lo = 0.0, hi = 1.0;
  if (!b.x.empty()) {
    lo = *std::min_element(b.lo.begin(), b.lo.end());
    hi = *std::max_element(b.hi.begin(), b.hi.end());
  }
  svg_open(os, 760, 340, title);
  const SvgPanel panel(60, 50, 660, 240, max_iter({b}), std::min(lo, 0.0), hi);
  panel.frame(os, metric_label + " (median, 20-80% band)");
  panel.band(os, b, colour(0, 1));
  os << "<text x=\"390\" y=\"325\" font-size=\"11\" text-anchor=\"middle\">iteration</text>\n</svg>\n";
}

std::vector<SweepRow> run_sweep(const ExperimentConfig& cfg, const std::string& algorithm) {
  if (algorithm != "predict" && algorithm != "control") throw Error("sweep algorithm must be predict or control");
  const std::vector<double> gammas = cfg.reals("sweep_gamma");
  if (gammas.empty()) throw ConfigError("config key 'sweep_gamma': the sweep grid is empty");
  std::vector<double> lambdas = cfg.reals("sweep_lambda");
  if (lambdas.empty()) lambdas.push_back(sigmoid(cfg.real("lambda_logit_init")));
  for (double g : gammas) {
    if (!(g > 0.0 && g <= 1.0)) bad_value("sweep_gamma", exact(g), "values in (0,1]");
  }
  for (double l : lambdas) {
    if (!(l >= 0.0 && l <= 1.0)) bad_value("sweep_lambda", exact(l), "values in [0,1]");
  }
  std::vector<std::uint64_t> seeds = cfg.seeds();
  std::sort(seeds.begin(), seeds.end());

  struct Job {
    double gamma, lambda;
    std::uint64_t seed;
  };
  std::vector<Job> jobs;
  for (double g : gammas) {
    for (double l : lambdas) {
      for (auto s : seeds) jobs.push_back({g, l, s});
    }
  }
  ExperimentConfig base = cfg;
  base.set("adapt", "none");
  if (algorithm == "predict") {
    (void)base.prediction(seeds.front());
  } else {
    (void)base.control(seeds.front());
  }
  return run_pool<SweepRow>(jobs.size(), cfg.count("workers"), [&](std::size_t i) {
    const Job& job = jobs[i];
    ExperimentConfig c = base;
    c.set("gamma_logit_init", exact(logit(job.gamma)));
    c.set("lambda_logit_init", exact(logit(job.lambda)));
    const RunLog log = algorithm == "predict" ? run_td_lambda_baseline(c.prediction(job.seed))
                                              : run_a2c_baseline(c.control(job.seed));
    SweepRow row;
    row.gamma = job.gamma;
    row.lambda = job.lambda;
    row.seed = job.seed;
    row.final_metric = log.tail_metric(c.count("iterations"));
    row.aborted = log.aborted;
    return row;
  });
}

void write_sweep_csv(std::ostream& os, const std::vector<SweepRow>& rows) {
  os << "gamma,lambda,seed,final_metric\n";
  for (const auto& r : rows) {
    os << exact(r.gamma) << ',' << exact(r.lambda) << ',' << r.seed << ',' << exact(r.final_metric) << '\n';
  }
}

}  // namespace metagrad

#include "moc/train.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdlib>
#include <exception>
#include <mutex>
#include <random>
#include <sstream>
#include <thread>

#include "moc/error.hpp"

namespace moc {

using ojson = nlohmann::ordered_json;

void TrainConfig::validate() const {
  if (epochs < 1) throw ValidationError("epochs must be >= 1");
  if (!(learning_rate > 0.0) || !std::isfinite(learning_rate)) {
    throw ValidationError("learning_rate must be > 0");
  }
  if (!(lr_decay_per_epoch > 0.0 && lr_decay_per_epoch <= 1.0)) {
    throw ValidationError("lr_decay_per_epoch must lie in (0, 1]");
  }
  if (!(beta1 >= 0.0 && beta1 < 1.0) || !(beta2 >= 0.0 && beta2 < 1.0)) {
    throw ValidationError("beta1 and beta2 must lie in [0, 1)");
  }
  if (!(adam_epsilon > 0.0)) throw ValidationError("adam_epsilon must be > 0");
  if (!(weight_decay >= 0.0)) throw ValidationError("weight_decay must be >= 0");
  if (batch_size < 1) throw ValidationError("batch_size must be >= 1");
  if (out_stride < 1) throw ValidationError("out_stride must be >= 1");
  for (const auto& a : augment) {
    if (a != "flip") throw ValidationError("unknown augmentation '" + a + "'");
  }
  loss.validate();
  model.validate();
  kernel.validate();
}

ojson TrainConfig::to_json() const {
  ojson j;
  j["epochs"] = epochs;
  j["learning_rate"] = learning_rate;
  j["lr_decay_per_epoch"] = lr_decay_per_epoch;
  j["beta1"] = beta1;
  j["beta2"] = beta2;
  j["adam_epsilon"] = adam_epsilon;
  j["weight_decay"] = weight_decay;
  j["batch_size"] = batch_size;
  j["seed"] = seed;
  j["augment"] = augment;
  j["out_stride"] = out_stride;
  j["loss"] = loss.to_json();
  j["model"] = model.to_json();
  j["kernel"] = {{"sigma", kernel.sigma}, {"size", kernel.size}};
  return j;
}

TrainConfig TrainConfig::from_json(const ojson& j) {
  TrainConfig c;
  try {
    c.epochs = j.value("epochs", c.epochs);
    c.learning_rate = j.value("learning_rate", c.learning_rate);
    c.lr_decay_per_epoch = j.value("lr_decay_per_epoch", c.lr_decay_per_epoch);
    c.beta1 = j.value("beta1", c.beta1);
    c.beta2 = j.value("beta2", c.beta2);
    c.adam_epsilon = j.value("adam_epsilon", c.adam_epsilon);
    c.weight_decay = j.value("weight_decay", c.weight_decay);
    c.batch_size = j.value("batch_size", c.batch_size);
    c.seed = j.value("seed", c.seed);
    c.augment = j.value("augment", c.augment);
    c.out_stride = j.value("out_stride", c.out_stride);
    if (j.contains("loss")) c.loss = LossConfig::from_json(j.at("loss"));
    if (j.contains("model")) c.model = ModelConfig::from_json(j.at("model"));
    if (j.contains("kernel")) {
      c.kernel.sigma = j.at("kernel").value("sigma", c.kernel.sigma);
      c.kernel.size = j.at("kernel").value("size", c.kernel.size);
    }
  } catch (const nlohmann::json::exception& e) {
    throw ValidationError(std::string("train config: ") + e.what());
  }
  c.validate();
  return c;
}

std::vector<Sample> synthetic_dataset(const SceneConfig& scenes, std::size_t count,
                                      const CategoryTaxonomy& taxonomy,
                                      const GaussianKernelSpec& kernel, int out_stride,
                                      const std::string& id_prefix) {
  std::vector<Sample> out;
  out.reserve(count);
  for (std::size_t i = 0; i < count; ++i) {
    SceneConfig cfg = scenes;
    cfg.seed = mix_seed(scenes.seed, i);
    const std::string id = id_prefix + "_" + std::to_string(i);
    auto scene = synth_scene(cfg, id);
    auto grouped = group_to_moc6(scene.annotations, taxonomy);
    out.push_back({id, scene.rgb, scene.nir, generate_gt(grouped, kernel, out_stride)});
  }
  return out;
}

// ---------------------------------------------------------------------------

AdamW::AdamW(std::vector<Tensor> params, double beta1, double beta2, double epsilon,
             double weight_decay)
    : params_(std::move(params)),
      beta1_(beta1),
      beta2_(beta2),
      epsilon_(epsilon),
      weight_decay_(weight_decay) {
  for (const auto& p : params_) {
    m_.emplace_back(p.numel(), 0.0);
    v_.emplace_back(p.numel(), 0.0);
  }
}

void AdamW::step(double learning_rate, double grad_scale) {
  ++t_;
  const double c1 = 1.0 - std::pow(beta1_, static_cast<double>(t_));
  const double c2 = 1.0 - std::pow(beta2_, static_cast<double>(t_));
  for (std::size_t k = 0; k < params_.size(); ++k) {
    auto& p = params_[k];
    const auto g = p.grad();
    auto w = p.mutable_values();
    auto& m = m_[k];
    auto& v = v_[k];
    for (std::size_t i = 0; i < w.size(); ++i) {
      const double gi = g[i] / grad_scale;
      m[i] = beta1_ * m[i] + (1.0 - beta1_) * gi;
      v[i] = beta2_ * v[i] + (1.0 - beta2_) * gi * gi;
      w[i] -= learning_rate * weight_decay_ * w[i];
      w[i] -= learning_rate * (m[i] / c1) / (std::sqrt(v[i] / c2) + epsilon_);
    }
  }
}

// ---------------------------------------------------------------------------

namespace {

std::optional<Tensor> nir_input(const Sample& s, const ModelConfig& cfg) {
  if (!cfg.use_nir) return std::nullopt;
  return s.nir;
}

void check_sample(const Sample& s, const ModelConfig& cfg) {
  if (s.rgb.dim(1) != cfg.input_size || s.rgb.dim(2) != cfg.input_size) {
    throw ValidationError("scene '" + s.id + "' is " + shape_string(s.rgb.shape()) +
                          " but the model expects input_size " +
                          std::to_string(cfg.input_size));
  }
  if (s.gt.density.channels() != cfg.num_categories) {
    throw ValidationError("scene '" + s.id + "' has " +
                          std::to_string(s.gt.density.channels()) +
                          " density channels, model predicts " +
                          std::to_string(cfg.num_categories));
  }
}

[[noreturn]] void numerical_abort(const MccModel& model, std::size_t epoch,
                                  const std::string& scene, const LossTerms& terms) {
  std::ostringstream msg;
  msg << "non-finite loss at epoch " << epoch + 1 << ", scene '" << scene
      << "': counting=" << terms.counting.item() << " spatial=" << terms.spatial.item()
      << " total=" << terms.total.item() << "; parameter norms:";
  for (const auto& [name, t] : model.parameters()) {
    double s = 0.0;
    for (double v : t.values()) s += v * v;
    msg << ' ' << name << '=' << std::sqrt(s);
  }
  throw NumericalError(msg.str());
}

}  // namespace

std::vector<EpochLosses> train(MccModel& model, const std::vector<Sample>& data,
                               const TrainConfig& cfg, const EpochCallback& on_epoch) {
  cfg.validate();
  if (data.empty()) throw ValidationError("train: no training scenes");
  for (const auto& s : data) check_sample(s, model.config);

  model.set_requires_grad(true);
  std::vector<Tensor> params;
  for (const auto& [name, t] : model.parameters()) params.push_back(t);
  AdamW opt(params, cfg.beta1, cfg.beta2, cfg.adam_epsilon, cfg.weight_decay);
  const bool flip =
      std::find(cfg.augment.begin(), cfg.augment.end(), "flip") != cfg.augment.end();

  std::mt19937_64 rng(mix_seed(cfg.seed, 17));
  std::bernoulli_distribution coin(0.5);
  std::vector<std::size_t> order(data.size());
  double lr = cfg.learning_rate;
  std::vector<EpochLosses> history;

  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
    std::shuffle(order.begin(), order.end(), rng);
    EpochLosses acc;
    std::size_t pending = 0;
    model.zero_grad();
    for (std::size_t idx : order) {
      const Sample& s = data[idx];
      Tensor rgb = s.rgb, nir = s.nir;
      Tensor gt = s.gt.density.values, mask = s.gt.mask.values;
      if (flip && coin(rng)) {
        rgb = flip_horizontal(rgb);
        nir = flip_horizontal(nir);
        gt = flip_horizontal(gt);
        mask = flip_horizontal(mask);
      }
      const auto pred = forward_trace(rgb, model.config.use_nir ? std::optional<Tensor>(nir)
                                                                : std::nullopt,
                                      model)
                            .prediction;
      const auto terms = total_loss(pred, gt, mask, cfg.loss);
      if (!std::isfinite(terms.total.item())) numerical_abort(model, epoch, s.id, terms);
      backward(terms.total);
      acc.counting += terms.counting.item();
      acc.spatial += terms.spatial.item();
      acc.total += terms.total.item();
      if (++pending == cfg.batch_size) {
        opt.step(lr, static_cast<double>(pending));
        model.zero_grad();
        pending = 0;
      }
    }
    if (pending > 0) {
      opt.step(lr, static_cast<double>(pending));
      model.zero_grad();
    }
    const double n = static_cast<double>(data.size());
    acc.counting /= n;
    acc.spatial /= n;
    acc.total /= n;
    history.push_back(acc);
    if (on_epoch) on_epoch(epoch, acc);
    lr *= cfg.lr_decay_per_epoch;
  }
  model.set_requires_grad(false);
  return history;
}

Evaluation evaluate(const MccModel& model, const std::vector<Sample>& data,
                    const std::vector<std::string>& categories, double weight_eps,
                    WeightMode mode) {
  if (data.empty()) throw ValidationError("evaluate: no scenes");
  if (categories.size() != model.config.num_categories) {
    throw ValidationError("evaluate: " + std::to_string(categories.size()) +
                          " categories for a model with " +
                          std::to_string(model.config.num_categories) + " outputs");
  }
  NoGradGuard guard;
  Evaluation ev;
  ev.counts.categories = categories;
  double similarity = 0.0;
  for (const auto& s : data) {
    check_sample(s, model.config);
    const auto pred = forward(s.rgb, nir_input(s, model.config), model, categories);
    ev.counts.records.push_back({s.id, count_from_density(s.gt.density, s.gt.mask),
                                 count_from_density(pred, s.gt.mask)});
    similarity += mean_offdiagonal_similarity(pred.values);
  }
  ev.mean_offdiagonal_similarity = similarity / static_cast<double>(data.size());
  ev.report = build_report(ev.counts, weight_eps, mode);
  return ev;
}

ExperimentResult run_experiment(const TrainConfig& cfg, const std::vector<Sample>& train_set,
                                const std::vector<Sample>& test_set,
                                const std::vector<std::string>& categories,
                                MccModel* trained) {
  const auto start = std::chrono::steady_clock::now();
  ExperimentResult r;
  r.seed = cfg.seed;
  auto model = MccModel::init(cfg.model, cfg.seed);
  r.epochs = train(model, train_set, cfg);
  r.evaluation = evaluate(model, test_set, categories);
  r.wall_clock_seconds =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  if (trained) *trained = std::move(model);
  return r;
}

ojson ExperimentResult::to_json(bool include_timing) const {
  ojson j;
  j["seed"] = seed;
  ojson lc = ojson::array(), ls = ojson::array(), lt = ojson::array();
  for (const auto& e : epochs) {
    lc.push_back(e.counting);
    ls.push_back(e.spatial);
    lt.push_back(e.total);
  }
  j["losses"] = {{"counting", lc}, {"spatial", ls}, {"total", lt}};
  j["mean_offdiagonal_similarity"] = evaluation.mean_offdiagonal_similarity;
  j["report"] = evaluation.report.to_json();
  if (include_timing) j["wall_clock_seconds"] = wall_clock_seconds;
  return j;
}

// ---------------------------------------------------------------------------

void AblationConfig::validate() const {
  train.validate();
  scenes.validate();
  if (train_scenes < 1 || test_scenes < 1) throw ValidationError("ablation needs scenes");
  if (seeds.empty()) throw ValidationError("ablation needs at least one seed");
  if (gammas.empty()) throw ValidationError("ablation needs at least one gamma");
  for (double g : gammas) {
    if (!(g >= 0.0)) throw ValidationError("gamma values must be >= 0");
  }
}

ojson AblationConfig::to_json() const {
  return ojson{{"train", train.to_json()},
               {"scenes", scenes.to_json()},
               {"train_scenes", train_scenes},
               {"test_scenes", test_scenes},
               {"seeds", seeds},
               {"gammas", gammas},
               {"focus_categories", focus_categories}};
}

AblationConfig AblationConfig::from_json(const ojson& j) {
  AblationConfig c;
  try {
    if (j.contains("train")) c.train = TrainConfig::from_json(j.at("train"));
    if (j.contains("scenes")) c.scenes = SceneConfig::from_json(j.at("scenes"));
    c.train_scenes = j.value("train_scenes", c.train_scenes);
    c.test_scenes = j.value("test_scenes", c.test_scenes);
    c.seeds = j.value("seeds", c.seeds);
    c.gammas = j.value("gammas", c.gammas);
    c.focus_categories = j.value("focus_categories", c.focus_categories);
  } catch (const nlohmann::json::exception& e) {
    throw ValidationError(std::string("ablation config: ") + e.what());
  }
  c.validate();
  return c;
}

double AblationCell::mean(const std::vector<double>& v) {
  if (v.empty()) return 0.0;
  double s = 0.0;
  for (double x : v) s += x;
  return s / static_cast<double>(v.size());
}

SignTest sign_test(const std::vector<double>& candidate, const std::vector<double>& baseline) {
  if (candidate.size() != baseline.size()) {
    throw ValidationError("sign_test: series lengths differ");
  }
  SignTest t;
  for (std::size_t i = 0; i < candidate.size(); ++i) {
    if (candidate[i] < baseline[i]) {
      ++t.wins;
    } else if (candidate[i] > baseline[i]) {
      ++t.losses;
    } else {
      ++t.ties;
    }
  }
  const std::size_t n = t.wins + t.losses;
  if (n == 0) return t;
  // P(X <= min(wins, losses)) under Binomial(n, 1/2), doubled
  const std::size_t k = std::min(t.wins, t.losses);
  double tail = 0.0;
  for (std::size_t i = 0; i <= k; ++i) {
    tail += std::exp(std::lgamma(n + 1.0) - std::lgamma(i + 1.0) - std::lgamma(n - i + 1.0) -
                     static_cast<double>(n) * std::log(2.0));
  }
  t.p_value = std::min(1.0, 2.0 * tail);
  return t;
}

std::size_t worker_count() {
  if (const char* env = std::getenv("MOC_THREADS")) {
    char* end = nullptr;
    const long v = std::strtol(env, &end, 10);
    if (end != env && v > 0) return static_cast<std::size_t>(v);
  }
  return std::max(1u, std::thread::hardware_concurrency());
}

void parallel_for(std::size_t jobs, const std::function<void(std::size_t)>& fn) {
  const std::size_t workers = std::min(worker_count(), jobs);
  if (workers <= 1) {
    for (std::size_t i = 0; i < jobs; ++i) fn(i);
    return;
  }
  std::mutex mu;
  std::size_t next = 0;
  std::exception_ptr failure;
  auto loop = [&] {
    for (;;) {
      std::size_t job;
      {
        std::lock_guard lock(mu);
        if (next >= jobs || failure) return;
        job = next++;
      }
      try {
        fn(job);
      } catch (...) {
        std::lock_guard lock(mu);
        if (!failure) failure = std::current_exception();
      }
    }
  };
  std::vector<std::thread> pool;
  for (std::size_t i = 0; i < workers; ++i) pool.emplace_back(loop);
  for (auto& t : pool) t.join();
  if (failure) std::rethrow_exception(failure);
}

std::string to_string(AblationAxis axis) {
  return axis == AblationAxis::kGamma ? "gamma" : "nir-attention";
}

AblationAxis ablation_axis_from_string(const std::string& s) {
  if (s == "gamma") return AblationAxis::kGamma;
  if (s == "nir" || s == "dual-attention" || s == "nir-attention") {
    return AblationAxis::kNirAttention;
  }
  throw ValidationError("unknown ablation axis '" + s + "' (gamma, nir, dual-attention)");
}

AblationResult run_ablation(AblationAxis axis, const AblationConfig& cfg,
                            const std::function<void(const std::string&)>& log) {
  cfg.validate();
  const auto taxonomy = CategoryTaxonomy::moc6();
  const auto categories = taxonomy.group_names();
  std::vector<std::size_t> focus;
  for (const auto& name : cfg.focus_categories) {
    const auto it = std::find(categories.begin(), categories.end(), name);
    if (it == categories.end()) throw ValidationError("unknown focus category '" + name + "'");
    focus.push_back(static_cast<std::size_t>(it - categories.begin()));
  }

  AblationResult result;
  result.axis = axis;
  result.seeds = cfg.seeds;
  result.focus_categories = cfg.focus_categories;
  if (axis == AblationAxis::kGamma) {
    for (double g : cfg.gammas) {
      AblationCell c;
      c.label = "gamma=" + format_real(g);
      c.gamma = g;
      result.cells.push_back(c);
    }
  } else {
    for (bool nir : {false, true}) {
      for (bool att : {false, true}) {
        AblationCell c;
        c.label = std::string(nir ? "nir" : "rgb") + (att ? "+dual-attention" : "");
        c.gamma = cfg.train.loss.gamma;
        c.use_nir = nir;
        c.use_dual_attention = att;
        result.cells.push_back(c);
      }
    }
  }
  for (auto& c : result.cells) {
    c.mse_bar.assign(cfg.seeds.size(), 0.0);
    c.wmse.assign(cfg.seeds.size(), 0.0);
    c.similarity.assign(cfg.seeds.size(), 0.0);
    c.focus_mae.assign(focus.size(), std::vector<double>(cfg.seeds.size(), 0.0));
  }

  // datasets are shared by every cell of a seed
  std::vector<std::vector<Sample>> train_sets(cfg.seeds.size()), test_sets(cfg.seeds.size());
  parallel_for(cfg.seeds.size(), [&](std::size_t s) {
    SceneConfig sc = cfg.scenes;
    sc.seed = mix_seed(cfg.seeds[s], 1);
    train_sets[s] = synthetic_dataset(sc, cfg.train_scenes, taxonomy, cfg.train.kernel,
                                      cfg.train.out_stride, "train");
    sc.seed = mix_seed(cfg.seeds[s], 2);
    test_sets[s] = synthetic_dataset(sc, cfg.test_scenes, taxonomy, cfg.train.kernel,
                                     cfg.train.out_stride, "test");
  });

  std::mutex log_mu;
  const std::size_t jobs = result.cells.size() * cfg.seeds.size();
  parallel_for(jobs, [&](std::size_t job) {
    auto& cell = result.cells[job / cfg.seeds.size()];
    const std::size_t s = job % cfg.seeds.size();
    TrainConfig tc = cfg.train;
    tc.seed = cfg.seeds[s];
    tc.loss.gamma = cell.gamma;
    tc.model.use_nir = cell.use_nir;
    tc.model.use_dual_attention = cell.use_dual_attention;
    tc.model.num_categories = categories.size();
    const auto r = run_experiment(tc, train_sets[s], test_sets[s], categories);
    cell.mse_bar[s] = r.evaluation.report.mse_bar;
    cell.wmse[s] = r.evaluation.report.wmse;
    cell.similarity[s] = r.evaluation.mean_offdiagonal_similarity;
    for (std::size_t f = 0; f < focus.size(); ++f) {
      cell.focus_mae[f][s] = r.evaluation.report.mae[focus[f]];
    }
    if (log) {
      std::lock_guard lock(log_mu);
      std::ostringstream line;
      line << cell.label << " seed=" << tc.seed << " mse_bar=" << cell.mse_bar[s]
           << " similarity=" << cell.similarity[s] << " (" << r.wall_clock_seconds << " s)";
      log(line.str());
    }
  });
  return result;
}

ojson AblationResult::to_json() const {
  ojson j;
  j["axis"] = to_string(axis);
  j["seeds"] = seeds;
  j["focus_categories"] = focus_categories;
  const AblationCell& baseline = cells.front();
  ojson rows = ojson::array();
  for (const auto& c : cells) {
    ojson row;
    row["label"] = c.label;
    row["gamma"] = c.gamma;
    row["use_nir"] = c.use_nir;
    row["use_dual_attention"] = c.use_dual_attention;
    row["mse_bar"] = {{"mean", AblationCell::mean(c.mse_bar)}, {"per_seed", c.mse_bar}};
    row["wmse"] = {{"mean", AblationCell::mean(c.wmse)}, {"per_seed", c.wmse}};
    row["similarity"] = {{"mean", AblationCell::mean(c.similarity)},
                         {"per_seed", c.similarity}};
    ojson fm = ojson::object();
    for (std::size_t f = 0; f < focus_categories.size(); ++f) {
      fm[focus_categories[f]] = {{"mean", AblationCell::mean(c.focus_mae[f])},
                                 {"per_seed", c.focus_mae[f]}};
    }
    row["focus_mae"] = fm;
    const auto st = sign_test(c.similarity, baseline.similarity);
    const auto sm = sign_test(c.mse_bar, baseline.mse_bar);
    row["vs_baseline"] = {
        {"baseline", baseline.label},
        {"similarity", {{"wins", st.wins}, {"losses", st.losses}, {"ties", st.ties},
                        {"p_value", st.p_value}}},
        {"mse_bar", {{"wins", sm.wins}, {"losses", sm.losses}, {"ties", sm.ties},
                     {"p_value", sm.p_value}}}};
    rows.push_back(row);
  }
  j["cells"] = rows;
  return j;
}

std::string AblationResult::to_csv() const {
  std::ostringstream out;
  out << "cell,gamma,use_nir,use_dual_attention,mean_mse,wmse,similarity";
  for (const auto& f : focus_categories) out << ",mae_" << f;
  out << '\n';
  for (const auto& c : cells) {
    out << c.label << ',' << format_real(c.gamma) << ',' << (c.use_nir ? 1 : 0) << ','
        << (c.use_dual_attention ? 1 : 0) << ',' << format_real(AblationCell::mean(c.mse_bar))
        << ',' << format_real(AblationCell::mean(c.wmse)) << ','
        << format_real(AblationCell::mean(c.similarity));
    for (const auto& m : c.focus_mae) out << ',' << format_real(AblationCell::mean(m));
    out << '\n';
  }
  return out.str();
}

}  // namespace moc

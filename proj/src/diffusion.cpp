#include "feddeo/diffusion.hpp"

#include "feddeo/digest.hpp"

#include <algorithm>
#include <numeric>
#include <numbers>
#include <stdexcept>

namespace feddeo {

namespace detail {
void check_timestep(const char* op, int t, const VarianceSchedule& sched) {
  if (t < 1 || t > sched.T())
    throw std::out_of_range(std::string(op) + ": timestep " + std::to_string(t) + " outside [1, " +
                            std::to_string(sched.T()) + "]");
}
}  // namespace detail

Eigen::Index VarianceSchedule::index(int t, int lo) const {
  if (t < lo || t > T())
    throw std::out_of_range("schedule: timestep " + std::to_string(t) + " outside [" +
                            std::to_string(lo) + ", " + std::to_string(T()) + "]");
  return lo == 1 ? t - 1 : t;
}

VarianceSchedule VarianceSchedule::from_alpha_bar(Vector alpha_bar, double eta) {
  if (alpha_bar.size() < 2) throw std::invalid_argument("schedule: need at least one timestep");
  if (alpha_bar[0] != 1.0) throw std::invalid_argument("schedule: alpha_bar[0] must be 1");
  if (eta < 0.0 || eta > 1.0) throw std::invalid_argument("schedule: eta must lie in [0, 1]");
  const Eigen::Index T = alpha_bar.size() - 1;
  VarianceSchedule s;
  s.eta_ = eta;
  s.alpha_bar_ = std::move(alpha_bar);
  s.beta_.resize(T);
  s.sigma_.resize(T);
  for (Eigen::Index t = 1; t <= T; ++t) {
    const double prev = s.alpha_bar_[t - 1];
    const double cur = s.alpha_bar_[t];
    if (!(cur > 0.0 && cur < prev))
      throw std::invalid_argument("schedule: alpha_bar must be positive and strictly decreasing (t=" +
                                  std::to_string(t) + ")");
    s.beta_[t - 1] = 1.0 - cur / prev;
    s.sigma_[t - 1] = eta * std::sqrt((1.0 - prev) / (1.0 - cur)) * std::sqrt(1.0 - cur / prev);
  }
  return s;
}

VarianceSchedule make_schedule(int T, double beta_min, double beta_max, double eta) {
  if (T < 2) throw std::invalid_argument("make_schedule: T must be >= 2");
  if (!(beta_min > 0.0 && beta_min <= beta_max && beta_max < 1.0))
    throw std::invalid_argument("make_schedule: need 0 < beta_min <= beta_max < 1");
  if (eta < 0.0 || eta > 1.0) throw std::invalid_argument("make_schedule: eta must lie in [0, 1]");
  Vector alpha_bar(T + 1);
  alpha_bar[0] = 1.0;
  for (int t = 1; t <= T; ++t) {
    const double beta = beta_min + (beta_max - beta_min) * (t - 1) / (T - 1);
    alpha_bar[t] = alpha_bar[t - 1] * (1.0 - beta);
  }
  return VarianceSchedule::from_alpha_bar(std::move(alpha_bar), eta);
}

Matrix time_embedding(std::span<const int> t, int dim) {
  if (dim <= 0 || dim % 2 != 0) throw std::invalid_argument("time_embedding: dim must be even and positive");
  const int half = dim / 2;
  Matrix out(static_cast<Eigen::Index>(t.size()), dim);
  for (std::size_t r = 0; r < t.size(); ++r) {
    for (int i = 0; i < half; ++i) {
      const double freq = std::exp(-std::log(10000.0) * i / half);
      out(static_cast<Eigen::Index>(r), i) = std::sin(t[r] * freq);
      out(static_cast<Eigen::Index>(r), half + i) = std::cos(t[r] * freq);
    }
  }
  return out;
}

NoisePredictor::NoisePredictor(NoisePredictorConfig config, std::uint64_t seed) : config_(config) {
  if (config_.data_dim < 1 || config_.data_dim > 16)
    throw std::invalid_argument("NoisePredictor: data_dim must lie in [1, 16]");
  if (config_.num_classes < 1 || config_.hidden < 1 || config_.hidden_layers < 1 || config_.cond_dim < 1)
    throw std::invalid_argument("NoisePredictor: sizes must be positive");
  Rng rng(seed);
  int fan_in = config_.data_dim + config_.time_dim + config_.cond_dim;
  for (int l = 0; l <= config_.hidden_layers; ++l) {
    const bool last = l == config_.hidden_layers;
    const int fan_out = last ? config_.data_dim : config_.hidden;
    const std::string prefix = "dm.layer" + std::to_string(l);
    layers_.push_back({Tensor(prefix + ".weight", gaussian_matrix(fan_in, fan_out, rng, 1.0 / std::sqrt(fan_in))),
                       Tensor(prefix + ".bias", Matrix::Zero(1, fan_out))});
    fan_in = fan_out;
  }
  class_embeddings_ = Tensor("dm.class_embeddings",
                             gaussian_matrix(config_.num_classes, config_.cond_dim, rng, config_.embedding_scale));
}

Var NoisePredictor::forward(Graph& g, const Matrix& x_t, std::span<const int> t, Var cond) const {
  if (x_t.cols() != config_.data_dim)
    throw ShapeError("predict_noise", "x_t " + dims_string(x_t.rows(), x_t.cols()) + " vs data dim " +
                                          std::to_string(config_.data_dim));
  if (static_cast<Eigen::Index>(t.size()) != x_t.rows())
    throw ShapeError("predict_noise", std::to_string(t.size()) + " timesteps for " +
                                          std::to_string(x_t.rows()) + " rows");
  const Matrix& c = g.value(cond);
  if (c.cols() != config_.cond_dim || c.rows() != x_t.rows())
    throw ShapeError("predict_noise", "condition " + dims_string(c.rows(), c.cols()) + " vs expected " +
                                          dims_string(x_t.rows(), config_.cond_dim));
  const Var parts[] = {g.constant(x_t), g.constant(time_embedding(t, config_.time_dim)), cond};
  Var h = g.concat(parts);
  for (std::size_t l = 0; l < layers_.size(); ++l) {
    h = g.affine(h, g.param(layers_[l].weight), g.param(layers_[l].bias));
    if (l + 1 < layers_.size()) h = g.silu(h);
  }
  return h;
}

Matrix NoisePredictor::infer(const Matrix& x_t, std::span<const int> t, const Matrix& cond) const {
  if (x_t.cols() != config_.data_dim || static_cast<Eigen::Index>(t.size()) != x_t.rows())
    throw ShapeError("predict_noise", "x_t " + dims_string(x_t.rows(), x_t.cols()) + " with " +
                                          std::to_string(t.size()) + " timesteps");
  if (cond.cols() != config_.cond_dim || cond.rows() != x_t.rows())
    throw ShapeError("predict_noise", "condition " + dims_string(cond.rows(), cond.cols()) +
                                          " vs expected " + dims_string(x_t.rows(), config_.cond_dim));
  Matrix h(x_t.rows(), config_.data_dim + config_.time_dim + config_.cond_dim);
  h.leftCols(config_.data_dim) = x_t;
  h.middleCols(config_.data_dim, config_.time_dim) = time_embedding(t, config_.time_dim);
  h.rightCols(config_.cond_dim) = cond;
  for (std::size_t l = 0; l < layers_.size(); ++l) {
    Matrix next = h * layers_[l].weight.value;
    next.rowwise() += layers_[l].bias.value.row(0);
    if (l + 1 < layers_.size())
      next = next.unaryExpr([](double v) { return v * (1.0 / (1.0 + std::exp(-v))); });
    h = std::move(next);
  }
  return h;
}

ConditionVector NoisePredictor::class_condition(int category) const {
  if (category < 0 || category >= config_.num_classes)
    throw std::out_of_range("class_condition: category " + std::to_string(category) + " outside [0, " +
                            std::to_string(config_.num_classes) + ")");
  return {class_embeddings_.value.row(category), ConditionKind::ClassEmbedding};
}

std::vector<const Tensor*> NoisePredictor::parameters() const {
  std::vector<const Tensor*> out;
  for (const Layer& l : layers_) {
    out.push_back(&l.weight);
    out.push_back(&l.bias);
  }
  out.push_back(&class_embeddings_);
  return out;
}

std::vector<Tensor*> NoisePredictor::mutable_parameters() {
  if (frozen_) throw std::logic_error("NoisePredictor: parameters are frozen");
  std::vector<Tensor*> out;
  for (Layer& l : layers_) {
    out.push_back(&l.weight);
    out.push_back(&l.bias);
  }
  out.push_back(&class_embeddings_);
  return out;
}

void NoisePredictor::zero_output_layer() {
  if (frozen_) throw std::logic_error("NoisePredictor: parameters are frozen");
  layers_.back().weight.value.setZero();
  layers_.back().bias.value.setZero();
}

std::string NoisePredictor::digest() const {
  ByteWriter w;
  for (const Tensor* p : parameters()) {
    w.u32(static_cast<std::uint32_t>(p->name.size()));
    w.bytes(p->name);
    w.u32(static_cast<std::uint32_t>(p->value.rows()));
    w.u32(static_cast<std::uint32_t>(p->value.cols()));
    for (Eigen::Index i = 0; i < p->value.size(); ++i) w.f32(static_cast<float>(p->value.data()[i]));
  }
  return sha256_hex(w.data());
}

void NoisePredictor::freeze() {
  for (Tensor* p : mutable_parameters()) {
    p->value = p->value.cast<float>().cast<double>();
    p->requires_grad = false;
  }
  frozen_ = true;
  frozen_digest_ = digest();
}

void NoisePredictor::freeze_expecting(const std::string& expected) {
  freeze();
  if (frozen_digest_ != expected)
    throw IntegrityError("model digest " + frozen_digest_ + " differs from expected " + expected);
}

void NoisePredictor::verify_integrity() const {
  if (!frozen_) throw std::logic_error("NoisePredictor: model has not been frozen");
  const std::string now = digest();
  if (now != frozen_digest_)
    throw IntegrityError("frozen model modified: digest " + now + " != " + frozen_digest_);
}

namespace {

void check_condition(const NoisePredictor& model, const ConditionVector& c) {
  if (c.values.size() != model.config().cond_dim)
    throw ShapeError("condition", "length " + std::to_string(c.values.size()) + " vs cond_dim " +
                                      std::to_string(model.config().cond_dim));
}

}  // namespace

Matrix predict_noise(const NoisePredictor& model, const Matrix& x_t, int t, const ConditionVector& cond) {
  check_condition(model, cond);
  const std::vector<int> ts(static_cast<std::size_t>(x_t.rows()), t);
  return model.infer(x_t, ts, cond.values.replicate(x_t.rows(), 1));
}

TrainTrace pretrain_dm(NoisePredictor& model, const VarianceSchedule& sched, const CaptionedSamples& data,
                       const PretrainOptions& options, std::uint64_t seed, Tensor* style_table) {
  const auto n = static_cast<std::size_t>(data.x.rows());
  if (n == 0) throw std::invalid_argument("pretrain_dm: empty training data");
  if (data.labels.size() != n) throw ShapeError("pretrain_dm", "labels do not match samples");
  if (!data.styles.empty() && data.styles.size() != n) throw ShapeError("pretrain_dm", "styles do not match samples");
  const bool styled = std::any_of(data.styles.begin(), data.styles.end(), [](int s) { return s >= 0; });
  if (styled && !style_table) throw std::invalid_argument("pretrain_dm: style captions need a style table");
  if (style_table && style_table->value.cols() != model.config().cond_dim)
    throw ShapeError("pretrain_dm", "style table width vs cond_dim");

  std::vector<Tensor*> params = model.mutable_parameters();
  for (Tensor* p : params) p->requires_grad = true;
  if (style_table) style_table->requires_grad = false;

  AdamState adam(options.adam);
  Rng rng(seed);
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  const std::size_t batch = static_cast<std::size_t>(std::max(1, options.batch_size));
  const int dim = model.config().data_dim;
  std::uniform_int_distribution<int> draw_t(1, sched.T());
  std::normal_distribution<double> normal;

  TrainTrace trace;
  const std::size_t steps_per_epoch = (n + batch - 1) / batch;
  const double total_steps = static_cast<double>(steps_per_epoch) * std::max(1, options.epochs);
  double step = 0.0;
  for (int epoch = 0; epoch < options.epochs; ++epoch) {
    std::shuffle(order.begin(), order.end(), rng);
    double total = 0.0;
    for (std::size_t start = 0; start < n; start += batch) {
      const double cosine = 0.5 * (1.0 + std::cos(std::numbers::pi * step / total_steps));
      adam.set_learning_rate(options.adam.learning_rate *
                             (options.final_lr_fraction + (1.0 - options.final_lr_fraction) * cosine));
      step += 1.0;
      const std::size_t b = std::min(batch, n - start);
      Matrix x_t(static_cast<Eigen::Index>(b), dim);
      Matrix eps(static_cast<Eigen::Index>(b), dim);
      std::vector<int> ts(b), labels(b), styles(b);
      Matrix mask = Matrix::Zero(static_cast<Eigen::Index>(b), model.config().cond_dim);
      for (std::size_t i = 0; i < b; ++i) {
        const std::size_t k = order[start + i];
        const auto r = static_cast<Eigen::Index>(i);
        for (int j = 0; j < dim; ++j) eps(r, j) = normal(rng);
        ts[i] = draw_t(rng);
        const double a = sched.alpha_bar(ts[i]);
        x_t.row(r) = std::sqrt(a) * data.x.row(static_cast<Eigen::Index>(k)) + std::sqrt(1.0 - a) * eps.row(r);
        labels[i] = data.labels[k];
        const int s = data.styles.empty() ? -1 : data.styles[k];
        styles[i] = std::max(s, 0);
        if (s >= 0) mask.row(r).setOnes();
      }
      Graph g;
      Var cond = g.embedding(g.param(model.class_embeddings()), labels);
      if (styled) cond = g.add(cond, g.mul(g.embedding(g.param(*style_table), styles), g.constant(mask)));
      Var loss = g.mse(model.forward(g, x_t, ts, cond), g.constant(eps));
      total += g.scalar(loss) * static_cast<double>(b);
      GradientMap grads = g.backward(loss);
      adam.step(params, grads);
    }
    trace.epoch_loss.push_back(total / static_cast<double>(n));
  }
  return trace;
}

Matrix compose_noise(const NoisePredictor& model, const Matrix& x_t, int t, std::span<const GuidanceTerm> terms) {
  if (terms.empty()) throw std::invalid_argument("compose_noise: no guidance terms");
  for (const GuidanceTerm& term : terms) check_condition(model, term.condition);
  const Eigen::Index rows = x_t.rows();
  const auto k = static_cast<Eigen::Index>(terms.size());
  Matrix stacked_x(rows * k, x_t.cols());
  Matrix stacked_c(rows * k, model.config().cond_dim);
  for (Eigen::Index i = 0; i < k; ++i) {
    stacked_x.middleRows(i * rows, rows) = x_t;
    stacked_c.middleRows(i * rows, rows) = terms[static_cast<std::size_t>(i)].condition.values.replicate(rows, 1);
  }
  const std::vector<int> ts(static_cast<std::size_t>(rows * k), t);
  const Matrix eps = model.infer(stacked_x, ts, stacked_c);
  Matrix out = Matrix::Zero(rows, x_t.cols());
  for (Eigen::Index i = 0; i < k; ++i) out += terms[static_cast<std::size_t>(i)].weight * eps.middleRows(i * rows, rows);
  return out;
}

Matrix compose_noise(const NoisePredictor& model, const Matrix& x_t, int t, const ConditionVector& class_cond,
                     const ConditionVector& description, ComposeWeights weights) {
  const GuidanceTerm terms[] = {{description, weights.description_weight}, {class_cond, weights.class_weight}};
  return compose_noise(model, x_t, t, terms);
}

Matrix sample(const NoisePredictor& model, std::span<const GuidanceTerm> terms, int R,
              const VarianceSchedule& sched, std::uint64_t seed) {
  if (!model.frozen()) throw std::logic_error("sample: model must be frozen before generation");
  if (R < 1) throw std::invalid_argument("sample: R must be >= 1");
  Rng rng(seed);
  const int dim = model.config().data_dim;
  Matrix x = gaussian_matrix(R, dim, rng);
  Matrix noise = Matrix::Zero(R, dim);
  for (int t = sched.T(); t >= 1; --t) {
    const Matrix eps_hat = compose_noise(model, x, t, terms);
    if (sched.sigma(t) > 0.0) noise = gaussian_matrix(R, dim, rng);
    x = ddim_step(x, eps_hat, t, sched, noise);
  }
  return x;
}

Matrix sample(const NoisePredictor& model, const ConditionVector& class_cond, const ConditionVector& description,
              int R, const VarianceSchedule& sched, std::uint64_t seed, ComposeWeights weights) {
  const GuidanceTerm terms[] = {{description, weights.description_weight}, {class_cond, weights.class_weight}};
  return sample(model, terms, R, sched, seed);
}

}  // namespace feddeo

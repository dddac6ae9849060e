#include "feddeo/datagen.hpp"

#include "feddeo/digest.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <stdexcept>

namespace feddeo {

namespace {

Eigen::MatrixXd random_rotation(int dim, Rng& rng) {
  const Eigen::MatrixXd g = gaussian_matrix(dim, dim, rng);
  const Eigen::HouseholderQR<Eigen::MatrixXd> qr(g);
  Eigen::MatrixXd q = qr.householderQ();
  const Eigen::MatrixXd r = qr.matrixQR().triangularView<Eigen::Upper>();
  for (int i = 0; i < dim; ++i)
    if (r(i, i) < 0) q.col(i) *= -1.0;
  if (q.determinant() < 0) q.col(0) *= -1.0;
  return q;
}

}  // namespace

WorldSpec make_world(const WorldConfig& config) {
  if (config.categories < 2) throw std::invalid_argument("make_world: need at least 2 categories");
  if (config.domains < 2) throw std::invalid_argument("make_world: need at least 2 domains");
  if (config.dim < 1 || config.dim > 16) throw std::invalid_argument("make_world: dim must lie in [1, 16]");
  if (config.components < 1) throw std::invalid_argument("make_world: need at least one component");
  if (!(config.component_std_min > 0 && config.component_std_min <= config.component_std_max))
    throw std::invalid_argument("make_world: invalid component std range");
  if (!(config.scale_min > 0 && config.scale_min <= config.scale_max))
    throw std::invalid_argument("make_world: domain scales must be positive");

  WorldSpec world;
  world.config = config;
  Rng rng(stream_seed(config.seed, {0x776f726c64}));
  std::uniform_real_distribution<double> box(-config.spread, config.spread);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  std::normal_distribution<double> normal;

  std::vector<Eigen::VectorXd> centers;
  constexpr int kAttempts = 20000;
  for (int c = 0; c < config.categories; ++c) {
    bool placed = false;
    for (int attempt = 0; attempt < kAttempts && !placed; ++attempt) {
      Eigen::VectorXd candidate(config.dim);
      for (int j = 0; j < config.dim; ++j) candidate[j] = box(rng);
      placed = std::all_of(centers.begin(), centers.end(), [&](const Eigen::VectorXd& other) {
        return (other - candidate).norm() >= config.min_separation;
      });
      if (placed) centers.push_back(candidate);
    }
    if (!placed)
      throw std::invalid_argument("make_world: cannot place " + std::to_string(config.categories) +
                                  " categories with separation " + std::to_string(config.min_separation) +
                                  " in dim " + std::to_string(config.dim));
  }

  for (const Eigen::VectorXd& center : centers) {
    CategoryMixture mix;
    double total = 0.0;
    for (int k = 0; k < config.components; ++k) {
      Eigen::VectorXd mean = center;
      for (int j = 0; j < config.dim; ++j) mean[j] += config.component_offset * normal(rng);
      Eigen::VectorXd stds(config.dim);
      for (int j = 0; j < config.dim; ++j)
        stds[j] = config.component_std_min + (config.component_std_max - config.component_std_min) * unit(rng);
      const Eigen::MatrixXd q = random_rotation(config.dim, rng);
      Eigen::MatrixXd cov = q * stds.array().square().matrix().asDiagonal() * q.transpose();
      cov = 0.5 * (cov + cov.transpose());
      const double w = 0.5 + unit(rng);
      total += w;
      mix.components.push_back({{mean, cov}, w});
    }
    for (auto& comp : mix.components) comp.weight /= total;
    world.categories.push_back(std::move(mix));
  }

  std::uniform_real_distribution<double> scale(config.scale_min, config.scale_max);
  for (int d = 0; d < config.domains; ++d) {
    DomainTransform t;
    if (d == 0) {
      t.name = "canonical";
      t.rotation = Eigen::MatrixXd::Identity(config.dim, config.dim);
      t.scale = 1.0;
      t.translation = Eigen::VectorXd::Zero(config.dim);
    } else {
      t.name = "shifted" + std::to_string(d);
      t.rotation = random_rotation(config.dim, rng);
      t.scale = scale(rng);
      t.translation = Eigen::VectorXd::Zero(config.dim);
      const double angle = 2.0 * std::numbers::pi * (d - 1) / (config.domains - 1);
      t.translation[0] = config.domain_shift * std::cos(angle);
      if (config.dim > 1) t.translation[1] = config.domain_shift * std::sin(angle);
    }
    world.domains.push_back(std::move(t));
  }
  return world;
}

std::string WorldSpec::digest() const {
  ByteWriter w;
  w.u32(static_cast<std::uint32_t>(dim()));
  for (const CategoryMixture& mix : categories) {
    w.u32(static_cast<std::uint32_t>(mix.components.size()));
    for (const MixtureComponent& c : mix.components) {
      w.f64(c.weight);
      for (Eigen::Index i = 0; i < c.gaussian.mean.size(); ++i) w.f64(c.gaussian.mean[i]);
      for (Eigen::Index i = 0; i < c.gaussian.covariance.size(); ++i) w.f64(c.gaussian.covariance.data()[i]);
    }
  }
  for (const DomainTransform& t : domains) {
    w.bytes(t.name);
    w.f64(t.scale);
    for (Eigen::Index i = 0; i < t.rotation.size(); ++i) w.f64(t.rotation.data()[i]);
    for (Eigen::Index i = 0; i < t.translation.size(); ++i) w.f64(t.translation[i]);
  }
  return sha256_hex(w.data());
}

namespace {

void check_cell(const WorldSpec& world, int domain, int category) {
  if (domain < 0 || domain >= world.num_domains())
    throw std::out_of_range("world: domain " + std::to_string(domain) + " out of range");
  if (category < 0 || category >= world.num_categories())
    throw std::out_of_range("world: category " + std::to_string(category) + " out of range");
}

}  // namespace

Matrix sample_category(const WorldSpec& world, int domain, int category, int n, Rng& rng) {
  check_cell(world, domain, category);
  const CategoryMixture& mix = world.categories[static_cast<std::size_t>(category)];
  const DomainTransform& t = world.domains[static_cast<std::size_t>(domain)];
  std::vector<double> weights;
  std::vector<Eigen::MatrixXd> factors;
  for (const auto& c : mix.components) {
    weights.push_back(c.weight);
    factors.push_back(c.gaussian.cholesky().matrixL());
  }
  std::discrete_distribution<int> pick(weights.begin(), weights.end());
  std::normal_distribution<double> normal;
  Matrix out(n, world.dim());
  for (int i = 0; i < n; ++i) {
    const int k = pick(rng);
    Eigen::VectorXd z(world.dim());
    for (int j = 0; j < world.dim(); ++j) z[j] = normal(rng);
    const Eigen::VectorXd base = mix.components[static_cast<std::size_t>(k)].gaussian.mean + factors[static_cast<std::size_t>(k)] * z;
    out.row(i) = t.apply(base).transpose();
  }
  return out;
}

double log_density(const WorldSpec& world, int domain, int category, const Eigen::VectorXd& x) {
  check_cell(world, domain, category);
  const DomainTransform& t = world.domains[static_cast<std::size_t>(domain)];
  const Eigen::MatrixXd A = t.linear();
  double best = -std::numeric_limits<double>::infinity();
  std::vector<double> terms;
  for (const auto& c : world.categories[static_cast<std::size_t>(category)].components) {
    const double v = std::log(c.weight) + c.gaussian.transformed(A, t.translation).log_density(x);
    terms.push_back(v);
    best = std::max(best, v);
  }
  double s = 0.0;
  for (double v : terms) s += std::exp(v - best);
  return best + std::log(s);
}

double density(const WorldSpec& world, int domain, int category, const Eigen::VectorXd& x) {
  return std::exp(log_density(world, domain, category, x));
}

void LabeledSamples::append(const Matrix& rows, int label, int domain) {
  const Eigen::Index old = x.rows();
  Matrix grown(old + rows.rows(), rows.cols());
  if (old > 0) {
    if (x.cols() != rows.cols()) throw ShapeError("LabeledSamples::append", "column mismatch");
    grown.topRows(old) = x;
  }
  grown.bottomRows(rows.rows()) = rows;
  x = std::move(grown);
  labels.insert(labels.end(), static_cast<std::size_t>(rows.rows()), label);
  domains.insert(domains.end(), static_cast<std::size_t>(rows.rows()), domain);
}

namespace {

void fill_client(const WorldSpec& world, const PartitionConfig& config, ClientDataset& client, int train_n,
                 int test_n) {
  if (train_n < config.min_per_cell || test_n < 1)
    throw std::invalid_argument("partition: " + std::to_string(train_n) +
                                " samples per (category, domain) is below the configured minimum of " +
                                std::to_string(config.min_per_cell));
  for (int c : client.categories) {
    for (int d : client.domains) {
      Rng train_rng(stream_seed(config.seed, {static_cast<std::uint64_t>(client.client_id),
                                              static_cast<std::uint64_t>(c), static_cast<std::uint64_t>(d), 0}));
      Rng test_rng(stream_seed(config.seed, {static_cast<std::uint64_t>(client.client_id),
                                             static_cast<std::uint64_t>(c), static_cast<std::uint64_t>(d), 1}));
      client.train.append(sample_category(world, d, c, train_n, train_rng), c, d);
      client.test.append(sample_category(world, d, c, test_n, test_rng), c, d);
    }
  }
}

}  // namespace

std::vector<ClientDataset> partition_feature_skew(const WorldSpec& world, const PartitionConfig& config) {
  if (config.clients < 1) throw std::invalid_argument("partition_feature_skew: need at least one client");
  if (config.clients > world.num_domains())
    throw std::invalid_argument("partition_feature_skew: " + std::to_string(config.clients) +
                                " clients exceed " + std::to_string(world.num_domains()) + " domains");
  std::vector<ClientDataset> out;
  for (int n = 0; n < config.clients; ++n) {
    ClientDataset client;
    client.client_id = n;
    for (int c = 0; c < world.num_categories(); ++c) client.categories.push_back(c);
    client.domains = {n};
    fill_client(world, config, client, config.train_per_category, config.test_per_category);
    out.push_back(std::move(client));
  }
  return out;
}

std::vector<ClientDataset> partition_label_skew(const WorldSpec& world, const PartitionConfig& config) {
  if (config.clients < 1) throw std::invalid_argument("partition_label_skew: need at least one client");
  if (config.clients > world.num_categories())
    throw std::invalid_argument("partition_label_skew: " + std::to_string(config.clients) +
                                " clients exceed " + std::to_string(world.num_categories()) + " categories");
  const int D = world.num_domains();
  const int train_n = (config.train_per_category + D - 1) / D;
  const int test_n = (config.test_per_category + D - 1) / D;
  std::vector<ClientDataset> out(static_cast<std::size_t>(config.clients));
  for (int n = 0; n < config.clients; ++n) {
    out[static_cast<std::size_t>(n)].client_id = n;
    for (int d = 0; d < D; ++d) out[static_cast<std::size_t>(n)].domains.push_back(d);
  }
  for (int c = 0; c < world.num_categories(); ++c)
    out[static_cast<std::size_t>(c % config.clients)].categories.push_back(c);
  for (ClientDataset& client : out) fill_client(world, config, client, train_n, test_n);
  return out;
}

CaptionedSamples make_server_corpus(const WorldSpec& world, const CorpusConfig& config) {
  if (config.per_cell < 1) throw std::invalid_argument("make_server_corpus: per_cell must be positive");
  if (config.style_caption_prob < 0 || config.style_caption_prob > 1 || config.mixed_caption_prob < 0 ||
      config.mixed_caption_prob > 1)
    throw std::invalid_argument("make_server_corpus: caption probability outside [0, 1]");
  CaptionedSamples corpus;
  const auto total = static_cast<Eigen::Index>(world.num_categories()) * world.num_domains() * config.per_cell;
  corpus.x.resize(total, world.dim());
  Eigen::Index row = 0;
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  for (int c = 0; c < world.num_categories(); ++c) {
    for (int d = 0; d < world.num_domains(); ++d) {
      Rng rng(stream_seed(config.seed, {static_cast<std::uint64_t>(c), static_cast<std::uint64_t>(d)}));
      corpus.x.middleRows(row, config.per_cell) = sample_category(world, d, c, config.per_cell, rng);
      for (int i = 0; i < config.per_cell; ++i) {
        corpus.labels.push_back(c);
        int style = -1;
        if (unit(rng) < config.mixed_caption_prob)
          style = 0;
        else if (d > 0 && unit(rng) < config.style_caption_prob)
          style = d;
        corpus.styles.push_back(style);
      }
      row += config.per_cell;
    }
  }
  return corpus;
}

}  // namespace feddeo

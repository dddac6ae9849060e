#pragma once

#include "feddeo/diffusion.hpp"
#include "feddeo/gaussian.hpp"
#include "feddeo/numerics.hpp"
#include "feddeo/random.hpp"

#include <cstdint>
#include <string>
#include <vector>

namespace feddeo {

struct MixtureComponent {
  Gaussian<double> gaussian;
  double weight = 1.0;
};

/// Base (untransformed) distribution of one category.
struct CategoryMixture {
  std::vector<MixtureComponent> components;
};

/// Invertible affine map x -> scale * rotation * z + translation.
struct DomainTransform {
  std::string name;
  Eigen::MatrixXd rotation;
  double scale = 1.0;
  Eigen::VectorXd translation;

  template <typename Derived>
  Eigen::VectorXd apply(const Eigen::MatrixBase<Derived>& z) const {
    return scale * (rotation * z) + translation;
  }
  Eigen::MatrixXd linear() const { return scale * rotation; }
};

struct WorldConfig {
  int categories = 10;
  int domains = 6;
  int dim = 2;
  int components = 2;
  /// Class centers are drawn in [-spread, spread]^dim.
  double spread = 1.0;
  double min_separation = 0.55;
  double component_offset = 0.12;
  double component_std_min = 0.05;
  double component_std_max = 0.10;
  /// Distance of non-canonical domain centers from the origin.
  double domain_shift = 3.5;
  double scale_min = 0.8;
  double scale_max = 1.2;
  std::uint64_t seed = 1;
};

/// Ground truth: per-category Gaussian mixtures seen through per-domain
/// transforms. Domain 0 is the canonical (identity) domain.
struct WorldSpec {
  WorldConfig config;
  std::vector<CategoryMixture> categories;
  std::vector<DomainTransform> domains;

  int num_categories() const { return static_cast<int>(categories.size()); }
  int num_domains() const { return static_cast<int>(domains.size()); }
  int dim() const { return config.dim; }
  std::string digest() const;
};

WorldSpec make_world(const WorldConfig& config);

/// n draws of `category` observed through `domain`; one row per draw.
Matrix sample_category(const WorldSpec& world, int domain, int category, int n, Rng& rng);

/// Exact density of the transformed mixture at x.
double density(const WorldSpec& world, int domain, int category, const Eigen::VectorXd& x);
double log_density(const WorldSpec& world, int domain, int category, const Eigen::VectorXd& x);

struct LabeledSamples {
  Matrix x;
  std::vector<int> labels;
  std::vector<int> domains;

  Eigen::Index size() const { return x.rows(); }
  void append(const Matrix& rows, int label, int domain);
};

struct ClientDataset {
  int client_id = 0;
  std::vector<int> categories;  // C_n, ascending
  std::vector<int> domains;     // domains the client observes
  LabeledSamples train;
  LabeledSamples test;
};

struct PartitionConfig {
  int clients = 6;
  int train_per_category = 200;
  int test_per_category = 100;
  int min_per_cell = 10;
  std::uint64_t seed = 2;
};

/// Client n owns every category, all drawn through domain n.
std::vector<ClientDataset> partition_feature_skew(const WorldSpec& world, const PartitionConfig& config);

/// Categories dealt round-robin (category c goes to client c mod N, so
/// with a remainder the first clients get one more). Every client draws its
/// categories evenly from all domains: ceil(per_category / domains) samples
/// per (category, domain).
std::vector<ClientDataset> partition_label_skew(const WorldSpec& world, const PartitionConfig& config);

struct CorpusConfig {
  int per_cell = 300;
  /// Probability a non-canonical sample is captioned with its style.
  double style_caption_prob = 0.9;
  /// Probability any sample gets the generic "mixed" caption (style row 0).
  double mixed_caption_prob = 0.2;
  std::uint64_t seed = 3;
};

/// The server's own pretraining data covering every (category, domain)
/// cell. Style row d > 0 captions domain d; row 0 is a generic caption
/// shared by all domains. Each sample first gets the generic caption with
/// `mixed_caption_prob`, otherwise non-canonical samples carry their own
/// style with `style_caption_prob`; the rest are captioned by class alone.
CaptionedSamples make_server_corpus(const WorldSpec& world, const CorpusConfig& config);

}  // namespace feddeo

#include "feddeo/config.hpp"

#include "feddeo/digest.hpp"
#include "feddeo/random.hpp"

#include <algorithm>
#include <charconv>
#include <fstream>
#include <functional>
#include <map>
#include <sstream>

namespace feddeo {

std::string to_string(PartitionKind kind) {
  return kind == PartitionKind::FeatureSkew ? "feature_skew" : "label_skew";
}

bool ExperimentConfig::baseline_enabled(const std::string& name) const {
  return std::find(baselines.begin(), baselines.end(), name) != baselines.end();
}

std::uint64_t derive_seed(const ExperimentConfig& config, SeedTag tag) {
  return stream_seed(config.seed, {static_cast<std::uint64_t>(tag)});
}

ExperimentConfig resolved(ExperimentConfig config) {
  config.world.seed = derive_seed(config, SeedTag::World);
  config.partition_config.seed = derive_seed(config, SeedTag::Partition);
  config.corpus.seed = derive_seed(config, SeedTag::Corpus);
  config.model.data_dim = config.world.dim;
  config.model.num_classes = config.world.categories;
  return config;
}

namespace {

std::string format_double(double v) {
  char buf[64];
  const auto res = std::to_chars(buf, buf + sizeof buf, v);
  return {buf, res.ptr};
}

template <typename T>
T parse_number(const std::string& key, const std::string& text) {
  T value{};
  const char* end = text.data() + text.size();
  const auto res = std::from_chars(text.data(), end, value);
  if (res.ec != std::errc{} || res.ptr != end)
    throw ConfigError("config: key '" + key + "' expects a number, got '" + text + "'");
  return value;
}

struct Field {
  std::string key;
  std::string help;
  std::function<std::string(ExperimentConfig&)> get;
  std::function<void(ExperimentConfig&, const std::string&)> set;
};

template <typename T, typename Access>
Field number(std::string key, std::string help, Access access) {
  Field f{key, std::move(help), {}, {}};
  f.get = [access](ExperimentConfig& c) {
    if constexpr (std::is_floating_point_v<T>)
      return format_double(access(c));
    else
      return std::to_string(access(c));
  };
  f.set = [access, key](ExperimentConfig& c, const std::string& v) { access(c) = parse_number<T>(key, v); };
  return f;
}

const std::vector<Field>& fields() {
  static const std::vector<Field> table = [] {
    std::vector<Field> t;
    t.push_back(number<std::uint64_t>("seed", "master seed; every random stream derives from it",
                                      [](ExperimentConfig& c) -> std::uint64_t& { return c.seed; }));

    t.push_back(number<int>("world.categories", "number of categories M",
                            [](ExperimentConfig& c) -> int& { return c.world.categories; }));
    t.push_back(number<int>("world.domains", "number of domains (domain 0 is canonical)",
                            [](ExperimentConfig& c) -> int& { return c.world.domains; }));
    t.push_back(number<int>("world.dim", "data dimension (1..16)", [](ExperimentConfig& c) -> int& { return c.world.dim; }));
    t.push_back(number<int>("world.components", "Gaussian components per category",
                            [](ExperimentConfig& c) -> int& { return c.world.components; }));
    t.push_back(number<double>("world.spread", "category centers lie in [-spread, spread]^dim",
                               [](ExperimentConfig& c) -> double& { return c.world.spread; }));
    t.push_back(number<double>("world.min_separation", "minimum distance between category centers",
                               [](ExperimentConfig& c) -> double& { return c.world.min_separation; }));
    t.push_back(number<double>("world.component_offset", "stddev of component means around the center",
                               [](ExperimentConfig& c) -> double& { return c.world.component_offset; }));
    t.push_back(number<double>("world.component_std_min", "smallest component axis stddev",
                               [](ExperimentConfig& c) -> double& { return c.world.component_std_min; }));
    t.push_back(number<double>("world.component_std_max", "largest component axis stddev",
                               [](ExperimentConfig& c) -> double& { return c.world.component_std_max; }));
    t.push_back(number<double>("world.domain_shift", "distance of shifted domains from the origin",
                               [](ExperimentConfig& c) -> double& { return c.world.domain_shift; }));
    t.push_back(number<double>("world.scale_min", "smallest domain scale",
                               [](ExperimentConfig& c) -> double& { return c.world.scale_min; }));
    t.push_back(number<double>("world.scale_max", "largest domain scale",
                               [](ExperimentConfig& c) -> double& { return c.world.scale_max; }));

    t.push_back({"partition.kind", "feature_skew | label_skew",
                 [](ExperimentConfig& c) { return to_string(c.partition); },
                 [](ExperimentConfig& c, const std::string& v) {
                   if (v == "feature_skew")
                     c.partition = PartitionKind::FeatureSkew;
                   else if (v == "label_skew")
                     c.partition = PartitionKind::LabelSkew;
                   else
                     throw ConfigError("config: partition.kind must be feature_skew or label_skew, got '" + v + "'");
                 }});
    t.push_back(number<int>("partition.clients", "number of clients N",
                            [](ExperimentConfig& c) -> int& { return c.partition_config.clients; }));
    t.push_back(number<int>("partition.train_per_category", "training samples per (client, category)",
                            [](ExperimentConfig& c) -> int& { return c.partition_config.train_per_category; }));
    t.push_back(number<int>("partition.test_per_category", "test samples per (client, category)",
                            [](ExperimentConfig& c) -> int& { return c.partition_config.test_per_category; }));
    t.push_back(number<int>("partition.min_per_cell", "minimum samples per (category, domain) cell",
                            [](ExperimentConfig& c) -> int& { return c.partition_config.min_per_cell; }));

    t.push_back(number<int>("corpus.per_cell", "server pretraining samples per (category, domain)",
                            [](ExperimentConfig& c) -> int& { return c.corpus.per_cell; }));
    t.push_back(number<double>("corpus.style_caption_prob", "probability a shifted-domain sample names its style",
                               [](ExperimentConfig& c) -> double& { return c.corpus.style_caption_prob; }));
    t.push_back(number<double>("corpus.mixed_caption_prob", "probability of the generic mixed-style caption",
                               [](ExperimentConfig& c) -> double& { return c.corpus.mixed_caption_prob; }));
    t.push_back(number<double>("corpus.style_scale", "stddev of the fixed style caption vectors",
                               [](ExperimentConfig& c) -> double& { return c.style_scale; }));

    t.push_back(number<int>("diffusion.T", "number of diffusion steps", [](ExperimentConfig& c) -> int& { return c.T; }));
    t.push_back(number<double>("diffusion.beta_min", "first noise rate of the linear schedule",
                               [](ExperimentConfig& c) -> double& { return c.beta_min; }));
    t.push_back(number<double>("diffusion.beta_max", "last noise rate of the linear schedule",
                               [](ExperimentConfig& c) -> double& { return c.beta_max; }));
    t.push_back(number<double>("diffusion.eta", "sampling stochasticity (0 = deterministic DDIM)",
                               [](ExperimentConfig& c) -> double& { return c.eta; }));
    t.push_back(number<int>("diffusion.hidden", "hidden width of the noise predictor",
                            [](ExperimentConfig& c) -> int& { return c.model.hidden; }));
    t.push_back(number<int>("diffusion.hidden_layers", "hidden layers of the noise predictor",
                            [](ExperimentConfig& c) -> int& { return c.model.hidden_layers; }));
    t.push_back(number<int>("diffusion.time_dim", "sinusoidal time embedding size",
                            [](ExperimentConfig& c) -> int& { return c.model.time_dim; }));
    t.push_back(number<int>("diffusion.cond_dim", "condition (f_c and description) length",
                            [](ExperimentConfig& c) -> int& { return c.model.cond_dim; }));
    t.push_back(number<double>("diffusion.embedding_scale", "init stddev of the class embedding table",
                               [](ExperimentConfig& c) -> double& { return c.model.embedding_scale; }));
    t.push_back(number<int>("diffusion.pretrain_epochs", "server pretraining epochs",
                            [](ExperimentConfig& c) -> int& { return c.pretrain.epochs; }));
    t.push_back(number<int>("diffusion.batch_size", "pretraining minibatch size",
                            [](ExperimentConfig& c) -> int& { return c.pretrain.batch_size; }));
    t.push_back(number<double>("diffusion.learning_rate", "pretraining Adam learning rate",
                               [](ExperimentConfig& c) -> double& { return c.pretrain.adam.learning_rate; }));
    t.push_back(number<double>("diffusion.final_lr_fraction", "cosine decay floor of the pretraining rate",
                               [](ExperimentConfig& c) -> double& { return c.pretrain.final_lr_fraction; }));

    t.push_back(number<int>("client.epochs", "description training epochs S",
                            [](ExperimentConfig& c) -> int& { return c.client.epochs; }));
    t.push_back(number<double>("client.learning_rate", "description Adam learning rate",
                               [](ExperimentConfig& c) -> double& { return c.client.adam.learning_rate; }));
    t.push_back(number<int>("client.batch_size", "description training minibatch size",
                            [](ExperimentConfig& c) -> int& { return c.client.batch_size; }));

    t.push_back(number<int>("server.R", "samples generated per (client, category)",
                            [](ExperimentConfig& c) -> int& { return c.generation.R; }));
    t.push_back(number<double>("server.class_weight", "guidance weight w_f of the class embedding branch",
                               [](ExperimentConfig& c) -> double& { return c.generation.weights.class_weight; }));
    t.push_back(number<double>("server.description_weight", "guidance weight w_d of the description branch",
                               [](ExperimentConfig& c) -> double& { return c.generation.weights.description_weight; }));

    t.push_back(number<int>("classifier.hidden", "classifier hidden width",
                            [](ExperimentConfig& c) -> int& { return c.classifier.hidden; }));
    t.push_back(number<int>("classifier.max_epochs", "classifier epoch cap",
                            [](ExperimentConfig& c) -> int& { return c.classifier.max_epochs; }));
    t.push_back(number<int>("classifier.batch_size", "classifier minibatch size",
                            [](ExperimentConfig& c) -> int& { return c.classifier.batch_size; }));
    t.push_back(number<double>("classifier.learning_rate", "classifier Adam learning rate",
                               [](ExperimentConfig& c) -> double& { return c.classifier.adam.learning_rate; }));
    t.push_back(number<double>("classifier.tolerance", "convergence: minimum loss improvement over the patience window",
                               [](ExperimentConfig& c) -> double& { return c.classifier.convergence_tolerance; }));
    t.push_back(number<int>("classifier.patience", "convergence window in epochs",
                            [](ExperimentConfig& c) -> int& { return c.classifier.patience; }));

    t.push_back(number<int>("fedavg.rounds", "FedAvg communication rounds",
                            [](ExperimentConfig& c) -> int& { return c.fedavg.rounds; }));
    t.push_back(number<int>("fedavg.local_epochs", "FedAvg local epochs per round",
                            [](ExperimentConfig& c) -> int& { return c.fedavg.local_epochs; }));

    t.push_back({"baselines", "comma list from prompts_only, ceiling, fedavg, local",
                 [](ExperimentConfig& c) {
                   std::vector<std::string> sorted = c.baselines;
                   std::sort(sorted.begin(), sorted.end());
                   sorted.erase(std::unique(sorted.begin(), sorted.end()), sorted.end());
                   std::string s;
                   for (const std::string& b : sorted) s += (s.empty() ? "" : ",") + b;
                   return s;
                 },
                 [](ExperimentConfig& c, const std::string& v) {
                   static const std::vector<std::string> known{"prompts_only", "ceiling", "fedavg", "local"};
                   std::vector<std::string> out;
                   std::stringstream ss(v);
                   for (std::string item; std::getline(ss, item, ',');) {
                     if (item.empty()) continue;
                     if (std::find(known.begin(), known.end(), item) == known.end())
                       throw ConfigError("config: unknown baseline '" + item + "'");
                     if (std::find(out.begin(), out.end(), item) == out.end()) out.push_back(item);
                   }
                   std::sort(out.begin(), out.end());
                   c.baselines = std::move(out);
                 }});
    t.push_back(number<int>("metrics.kl_k", "neighbour count of the KL estimator",
                            [](ExperimentConfig& c) -> int& { return c.kl_k; }));

    t.push_back({"out", "output directory (not part of the digest)",
                 [](ExperimentConfig& c) { return c.out.string(); },
                 [](ExperimentConfig& c, const std::string& v) {
                   if (v.empty()) throw ConfigError("config: out must not be empty");
                   c.out = v;
                 }});
    std::sort(t.begin(), t.end(), [](const Field& a, const Field& b) { return a.key < b.key; });
    return t;
  }();
  return table;
}

const Field& field(const std::string& key) {
  for (const Field& f : fields())
    if (f.key == key) return f;
  throw ConfigError("config: unknown key '" + key + "'");
}

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

}  // namespace

void set_config_value(ExperimentConfig& config, const std::string& key, const std::string& value) {
  field(key).set(config, trim(value));
}

std::string get_config_value(const ExperimentConfig& config, const std::string& key) {
  return field(key).get(const_cast<ExperimentConfig&>(config));
}

ExperimentConfig parse_config(const std::string& text, ExperimentConfig base) {
  std::stringstream in(text);
  std::map<std::string, int> seen;
  int lineno = 0;
  for (std::string line; std::getline(in, line);) {
    ++lineno;
    line = trim(line);
    if (line.empty() || line[0] == '#') continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos)
      throw ConfigError("config line " + std::to_string(lineno) + ": expected key=value, got '" + line + "'");
    const std::string key = trim(line.substr(0, eq));
    if (auto it = seen.find(key); it != seen.end())
      throw ConfigError("config line " + std::to_string(lineno) + ": key '" + key + "' already set on line " +
                        std::to_string(it->second));
    seen[key] = lineno;
    try {
      set_config_value(base, key, line.substr(eq + 1));
    } catch (const ConfigError& e) {
      throw ConfigError("config line " + std::to_string(lineno) + ": " + e.what());
    }
  }
  return base;
}

ExperimentConfig load_config(const std::filesystem::path& path, ExperimentConfig base) {
  std::ifstream in(path);
  if (!in) throw ConfigError("config: cannot read " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  return parse_config(ss.str(), std::move(base));
}

void validate(const ExperimentConfig& c) {
  auto require = [](bool ok, const std::string& what) {
    if (!ok) throw ConfigError("config: " + what);
  };
  require(c.world.categories >= 2, "world.categories must be >= 2");
  require(c.world.domains >= 2, "world.domains must be >= 2");
  require(c.world.dim >= 1 && c.world.dim <= 16, "world.dim must lie in [1, 16]");
  require(c.world.components >= 1, "world.components must be >= 1");
  require(c.world.spread > 0 && c.world.min_separation >= 0, "world.spread must be > 0, min_separation >= 0");
  require(c.world.component_std_min > 0 && c.world.component_std_min <= c.world.component_std_max,
          "need 0 < world.component_std_min <= world.component_std_max");
  require(c.world.scale_min > 0 && c.world.scale_min <= c.world.scale_max, "need 0 < world.scale_min <= scale_max");
  require(c.partition_config.clients >= 1, "partition.clients must be >= 1");
  if (c.partition == PartitionKind::FeatureSkew)
    require(c.partition_config.clients <= c.world.domains, "feature_skew needs partition.clients <= world.domains");
  else
    require(c.partition_config.clients <= c.world.categories, "label_skew needs partition.clients <= world.categories");
  require(c.partition_config.train_per_category >= 1 && c.partition_config.test_per_category >= 1,
          "partition sample counts must be >= 1");
  require(c.corpus.per_cell >= 1, "corpus.per_cell must be >= 1");
  require(c.corpus.style_caption_prob >= 0 && c.corpus.style_caption_prob <= 1 && c.corpus.mixed_caption_prob >= 0 &&
              c.corpus.mixed_caption_prob <= 1,
          "caption probabilities must lie in [0, 1]");
  require(c.style_scale >= 0, "corpus.style_scale must be >= 0");
  require(c.T >= 2, "diffusion.T must be >= 2");
  require(c.beta_min > 0 && c.beta_min <= c.beta_max && c.beta_max < 1, "need 0 < beta_min <= beta_max < 1");
  require(c.eta >= 0 && c.eta <= 1, "diffusion.eta must lie in [0, 1]");
  require(c.model.hidden >= 1 && c.model.hidden_layers >= 1 && c.model.cond_dim >= 1, "network sizes must be >= 1");
  require(c.model.time_dim >= 2 && c.model.time_dim % 2 == 0, "diffusion.time_dim must be even and >= 2");
  require(c.pretrain.epochs >= 0 && c.pretrain.batch_size >= 1, "pretraining epochs >= 0 and batch_size >= 1");
  require(c.pretrain.adam.learning_rate > 0, "diffusion.learning_rate must be > 0");
  require(c.pretrain.final_lr_fraction >= 0 && c.pretrain.final_lr_fraction <= 1,
          "diffusion.final_lr_fraction must lie in [0, 1]");
  require(c.client.epochs >= 0 && c.client.batch_size >= 1, "client.epochs >= 0 and client.batch_size >= 1");
  require(c.client.adam.learning_rate > 0, "client.learning_rate must be > 0");
  require(c.generation.R >= 1, "server.R must be >= 1");
  require(c.classifier.hidden >= 1 && c.classifier.max_epochs >= 1 && c.classifier.batch_size >= 1,
          "classifier sizes must be >= 1");
  require(c.classifier.adam.learning_rate > 0, "classifier.learning_rate must be > 0");
  require(c.classifier.patience >= 1 && c.classifier.convergence_tolerance >= 0, "classifier convergence settings");
  require(c.fedavg.rounds >= 1 && c.fedavg.local_epochs >= 1, "fedavg.rounds and local_epochs must be >= 1");
  require(c.kl_k >= 1, "metrics.kl_k must be >= 1");
}

std::string canonical_text(const ExperimentConfig& config) {
  std::string text;
  for (const Field& f : fields()) {
    if (f.key == "out") continue;
    text += f.key + "=" + f.get(const_cast<ExperimentConfig&>(config)) + "\n";
  }
  return text;
}

std::string config_digest(const ExperimentConfig& config) { return sha256_hex(canonical_text(config)); }

std::string pretrain_digest(const ExperimentConfig& config) {
  std::string text;
  for (const Field& f : fields()) {
    const bool relevant = f.key == "seed" || f.key.starts_with("world.") || f.key.starts_with("corpus.") ||
                          (f.key.starts_with("diffusion.") && f.key != "diffusion.eta");
    if (relevant) text += f.key + "=" + f.get(const_cast<ExperimentConfig&>(config)) + "\n";
  }
  return sha256_hex(text);
}

std::vector<ConfigKey> describe_config_keys() {
  ExperimentConfig defaults;
  std::vector<ConfigKey> out;
  for (const Field& f : fields()) out.push_back({f.key, f.get(defaults), f.help});
  return out;
}

}  // namespace feddeo

#include "feddeo/io.hpp"

#include "feddeo/digest.hpp"

#include <algorithm>
#include <charconv>
#include <map>
#include <set>
#include <sstream>
#include <stdexcept>

namespace feddeo {

std::string format_real(double v) {
  char buf[64];
  const auto res = std::to_chars(buf, buf + sizeof buf, v);
  return {buf, res.ptr};
}

double parse_real(const std::string& text) {
  double v = 0.0;
  const char* end = text.data() + text.size();
  const auto res = std::from_chars(text.data(), end, v);
  if (res.ec != std::errc{} || res.ptr != end) throw std::runtime_error("not a number: '" + text + "'");
  return v;
}

namespace {

int parse_int(const std::string& text) {
  int v = 0;
  const char* end = text.data() + text.size();
  const auto res = std::from_chars(text.data(), end, v);
  if (res.ec != std::errc{} || res.ptr != end) throw std::runtime_error("not an integer: '" + text + "'");
  return v;
}

std::vector<std::string> split(const std::string& line, char sep) {
  std::vector<std::string> out;
  std::stringstream ss(line);
  for (std::string item; std::getline(ss, item, sep);) out.push_back(item);
  if (!line.empty() && line.back() == sep) out.emplace_back();
  return out;
}

std::string coordinate_columns(Eigen::Index dim) {
  std::string s;
  for (Eigen::Index j = 0; j < dim; ++j) s += ",x_" + std::to_string(j);
  return s;
}

void append_row(std::string& out, const Matrix& x, Eigen::Index i) {
  for (Eigen::Index j = 0; j < x.cols(); ++j) out += "," + format_real(x(i, j));
  out += "\n";
}

/// Data rows (header line first) of a CSV text.
std::vector<std::vector<std::string>> table(const std::string& text, const std::vector<std::string>& leading) {
  std::stringstream in(csv_body(text));
  std::string header;
  if (!std::getline(in, header)) throw std::runtime_error("csv: missing header line");
  const std::vector<std::string> cols = split(header, ',');
  if (cols.size() < leading.size() + 1 || !std::equal(leading.begin(), leading.end(), cols.begin()))
    throw std::runtime_error("csv: unexpected header '" + header + "'");
  std::vector<std::vector<std::string>> rows;
  for (std::string line; std::getline(in, line);) {
    if (line.empty()) continue;
    std::vector<std::string> fields = split(line, ',');
    if (fields.size() != cols.size())
      throw std::runtime_error("csv: row has " + std::to_string(fields.size()) + " fields, header has " +
                               std::to_string(cols.size()));
    rows.push_back(std::move(fields));
  }
  rows.insert(rows.begin(), cols);
  return rows;
}

}  // namespace

std::string csv_header(const Provenance& p) {
  return "# config_digest=" + p.config_digest + "\n# seed=" + std::to_string(p.seed) + "\n# stage=" + p.stage + "\n";
}

Provenance csv_provenance(const std::string& text) {
  Provenance p;
  std::stringstream in(text);
  for (std::string line; std::getline(in, line) && line.starts_with("#");) {
    const auto eq = line.find('=');
    if (eq == std::string::npos) continue;
    const std::string key = line.substr(2, eq - 2);
    const std::string value = line.substr(eq + 1);
    if (key == "config_digest")
      p.config_digest = value;
    else if (key == "seed")
      p.seed = std::stoull(value);
    else if (key == "stage")
      p.stage = value;
  }
  return p;
}

std::string csv_body(const std::string& text) {
  std::size_t pos = 0;
  while (pos < text.size() && text[pos] == '#') {
    const auto nl = text.find('\n', pos);
    pos = nl == std::string::npos ? text.size() : nl + 1;
  }
  return text.substr(pos);
}

std::string clients_csv(std::span<const ClientDataset> clients, const Provenance& p) {
  const Eigen::Index dim = clients.empty() ? 0 : clients.front().train.x.cols();
  std::string out = csv_header(p) + "client_id,split,label" + coordinate_columns(dim) + "\n";
  for (const ClientDataset& c : clients) {
    for (const auto& [name, split] : {std::pair{"train", &c.train}, std::pair{"test", &c.test}}) {
      for (Eigen::Index i = 0; i < split->size(); ++i) {
        out += std::to_string(c.client_id) + "," + name + "," + std::to_string(split->labels[static_cast<std::size_t>(i)]);
        append_row(out, split->x, i);
      }
    }
  }
  return out;
}

std::vector<ClientDataset> parse_clients_csv(const std::string& text) {
  const auto rows = table(text, {"client_id", "split", "label"});
  const auto dim = static_cast<Eigen::Index>(rows.front().size() - 3);
  std::map<int, std::pair<std::vector<std::vector<std::string>>, std::vector<std::vector<std::string>>>> grouped;
  for (std::size_t r = 1; r < rows.size(); ++r) {
    const int id = parse_int(rows[r][0]);
    if (rows[r][1] == "train")
      grouped[id].first.push_back(rows[r]);
    else if (rows[r][1] == "test")
      grouped[id].second.push_back(rows[r]);
    else
      throw std::runtime_error("clients csv: unknown split '" + rows[r][1] + "'");
  }
  auto fill = [dim](const std::vector<std::vector<std::string>>& src, LabeledSamples& dst) {
    dst.x.resize(static_cast<Eigen::Index>(src.size()), dim);
    for (std::size_t i = 0; i < src.size(); ++i) {
      dst.labels.push_back(parse_int(src[i][2]));
      dst.domains.push_back(-1);
      for (Eigen::Index j = 0; j < dim; ++j)
        dst.x(static_cast<Eigen::Index>(i), j) = parse_real(src[i][static_cast<std::size_t>(3 + j)]);
    }
  };
  std::vector<ClientDataset> out;
  for (const auto& [id, splits] : grouped) {
    ClientDataset c;
    c.client_id = id;
    fill(splits.first, c.train);
    fill(splits.second, c.test);
    const std::set<int> cats(c.train.labels.begin(), c.train.labels.end());
    c.categories.assign(cats.begin(), cats.end());
    out.push_back(std::move(c));
  }
  return out;
}

std::string synthetic_csv(const SyntheticDataset& data, const Provenance& p) {
  std::string out = csv_header(p) + "client_id,category,replicate" + coordinate_columns(data.x.cols()) + "\n";
  for (Eigen::Index i = 0; i < data.size(); ++i) {
    const auto k = static_cast<std::size_t>(i);
    out += std::to_string(data.clients[k]) + "," + std::to_string(data.labels[k]) + "," +
           std::to_string(data.replicates[k]);
    append_row(out, data.x, i);
  }
  return out;
}

SyntheticDataset parse_synthetic_csv(const std::string& text) {
  const auto rows = table(text, {"client_id", "category", "replicate"});
  const auto dim = static_cast<Eigen::Index>(rows.front().size() - 3);
  SyntheticDataset data;
  data.x.resize(static_cast<Eigen::Index>(rows.size() - 1), dim);
  for (std::size_t r = 1; r < rows.size(); ++r) {
    data.clients.push_back(parse_int(rows[r][0]));
    data.labels.push_back(parse_int(rows[r][1]));
    data.replicates.push_back(parse_int(rows[r][2]));
    for (Eigen::Index j = 0; j < dim; ++j)
      data.x(static_cast<Eigen::Index>(r - 1), j) = parse_real(rows[r][static_cast<std::size_t>(3 + j)]);
  }
  data.config_digest = csv_provenance(text).config_digest;
  return data;
}

void stamp(Checkpoint& ckpt, const Provenance& p) {
  ckpt.metadata["config_digest"] = p.config_digest;
  ckpt.metadata["seed"] = std::to_string(p.seed);
  ckpt.metadata["stage"] = p.stage;
}

Provenance checkpoint_provenance(const Checkpoint& ckpt) {
  return {ckpt.meta("config_digest"), std::stoull(ckpt.meta("seed")), ckpt.meta("stage")};
}

namespace {

std::string key(const std::string& prefix, std::initializer_list<int> idx) {
  std::string s = prefix;
  for (int i : idx) s += "." + std::to_string(i);
  return s;
}

}  // namespace

Checkpoint world_checkpoint(const WorldSpec& world) {
  Checkpoint ckpt;
  auto& s = ckpt.scalars;
  const WorldConfig& cfg = world.config;
  s["config.categories"] = cfg.categories;
  s["config.domains"] = cfg.domains;
  s["config.dim"] = cfg.dim;
  s["config.components"] = cfg.components;
  s["config.spread"] = cfg.spread;
  s["config.min_separation"] = cfg.min_separation;
  s["config.component_offset"] = cfg.component_offset;
  s["config.component_std_min"] = cfg.component_std_min;
  s["config.component_std_max"] = cfg.component_std_max;
  s["config.domain_shift"] = cfg.domain_shift;
  s["config.scale_min"] = cfg.scale_min;
  s["config.scale_max"] = cfg.scale_max;
  ckpt.metadata["world_seed"] = std::to_string(cfg.seed);
  const int dim = world.dim();
  for (int c = 0; c < world.num_categories(); ++c) {
    const auto& comps = world.categories[static_cast<std::size_t>(c)].components;
    s[key("category", {c}) + ".components"] = static_cast<double>(comps.size());
    for (int k = 0; k < static_cast<int>(comps.size()); ++k) {
      const MixtureComponent& m = comps[static_cast<std::size_t>(k)];
      s[key("category", {c, k}) + ".weight"] = m.weight;
      for (int i = 0; i < dim; ++i) {
        s[key("category", {c, k}) + ".mean" + key("", {i})] = m.gaussian.mean[i];
        for (int j = 0; j < dim; ++j) s[key("category", {c, k}) + ".cov" + key("", {i, j})] = m.gaussian.covariance(i, j);
      }
    }
  }
  for (int d = 0; d < world.num_domains(); ++d) {
    const DomainTransform& t = world.domains[static_cast<std::size_t>(d)];
    ckpt.metadata[key("domain", {d}) + ".name"] = t.name;
    s[key("domain", {d}) + ".scale"] = t.scale;
    for (int i = 0; i < dim; ++i) {
      s[key("domain", {d}) + ".translation" + key("", {i})] = t.translation[i];
      for (int j = 0; j < dim; ++j) s[key("domain", {d}) + ".rotation" + key("", {i, j})] = t.rotation(i, j);
    }
  }
  ckpt.metadata["world_digest"] = world.digest();
  return ckpt;
}

WorldSpec world_from_checkpoint(const Checkpoint& ckpt) {
  WorldSpec world;
  WorldConfig& cfg = world.config;
  cfg.categories = static_cast<int>(ckpt.scalar("config.categories"));
  cfg.domains = static_cast<int>(ckpt.scalar("config.domains"));
  cfg.dim = static_cast<int>(ckpt.scalar("config.dim"));
  cfg.components = static_cast<int>(ckpt.scalar("config.components"));
  cfg.spread = ckpt.scalar("config.spread");
  cfg.min_separation = ckpt.scalar("config.min_separation");
  cfg.component_offset = ckpt.scalar("config.component_offset");
  cfg.component_std_min = ckpt.scalar("config.component_std_min");
  cfg.component_std_max = ckpt.scalar("config.component_std_max");
  cfg.domain_shift = ckpt.scalar("config.domain_shift");
  cfg.scale_min = ckpt.scalar("config.scale_min");
  cfg.scale_max = ckpt.scalar("config.scale_max");
  cfg.seed = std::stoull(ckpt.meta("world_seed"));
  const int dim = cfg.dim;
  for (int c = 0; c < cfg.categories; ++c) {
    CategoryMixture mix;
    const int n = static_cast<int>(ckpt.scalar(key("category", {c}) + ".components"));
    for (int k = 0; k < n; ++k) {
      Eigen::VectorXd mean(dim);
      Eigen::MatrixXd cov(dim, dim);
      for (int i = 0; i < dim; ++i) {
        mean[i] = ckpt.scalar(key("category", {c, k}) + ".mean" + key("", {i}));
        for (int j = 0; j < dim; ++j) cov(i, j) = ckpt.scalar(key("category", {c, k}) + ".cov" + key("", {i, j}));
      }
      mix.components.push_back({{mean, cov}, ckpt.scalar(key("category", {c, k}) + ".weight")});
    }
    world.categories.push_back(std::move(mix));
  }
  for (int d = 0; d < cfg.domains; ++d) {
    DomainTransform t;
    t.name = ckpt.meta(key("domain", {d}) + ".name");
    t.scale = ckpt.scalar(key("domain", {d}) + ".scale");
    t.translation.resize(dim);
    t.rotation.resize(dim, dim);
    for (int i = 0; i < dim; ++i) {
      t.translation[i] = ckpt.scalar(key("domain", {d}) + ".translation" + key("", {i}));
      for (int j = 0; j < dim; ++j) t.rotation(i, j) = ckpt.scalar(key("domain", {d}) + ".rotation" + key("", {i, j}));
    }
    world.domains.push_back(std::move(t));
  }
  if (world.digest() != ckpt.meta("world_digest"))
    throw IntegrityError("world checkpoint: contents do not match the recorded world digest");
  return world;
}

Checkpoint model_checkpoint(const NoisePredictor& model, const VarianceSchedule& sched, double beta_min,
                            double beta_max, const TrainTrace& trace, const Tensor* style_table) {
  if (!model.frozen()) throw std::logic_error("model_checkpoint: freeze the model first");
  Checkpoint ckpt;
  for (const Tensor* p : model.parameters()) ckpt.put_matrix(p->name, p->value);
  if (style_table) ckpt.put_matrix("server.style_table", style_table->value);
  if (!trace.epoch_loss.empty()) {
    const Eigen::Map<const RowVector> loss(trace.epoch_loss.data(), static_cast<Eigen::Index>(trace.epoch_loss.size()));
    ckpt.put_matrix("pretrain.epoch_loss", loss);
  }
  const NoisePredictorConfig& c = model.config();
  auto& s = ckpt.scalars;
  s["model.data_dim"] = c.data_dim;
  s["model.num_classes"] = c.num_classes;
  s["model.hidden"] = c.hidden;
  s["model.hidden_layers"] = c.hidden_layers;
  s["model.time_dim"] = c.time_dim;
  s["model.cond_dim"] = c.cond_dim;
  s["model.embedding_scale"] = c.embedding_scale;
  s["schedule.T"] = sched.T();
  s["schedule.beta_min"] = beta_min;
  s["schedule.beta_max"] = beta_max;
  ckpt.metadata["model_digest"] = model.frozen_digest();
  return ckpt;
}

NoisePredictor model_from_checkpoint(const Checkpoint& ckpt) {
  NoisePredictorConfig c;
  c.data_dim = static_cast<int>(ckpt.scalar("model.data_dim"));
  c.num_classes = static_cast<int>(ckpt.scalar("model.num_classes"));
  c.hidden = static_cast<int>(ckpt.scalar("model.hidden"));
  c.hidden_layers = static_cast<int>(ckpt.scalar("model.hidden_layers"));
  c.time_dim = static_cast<int>(ckpt.scalar("model.time_dim"));
  c.cond_dim = static_cast<int>(ckpt.scalar("model.cond_dim"));
  c.embedding_scale = ckpt.scalar("model.embedding_scale");
  NoisePredictor model(c, 0);
  for (Tensor* p : model.mutable_parameters()) {
    const Matrix m = ckpt.matrix(p->name);
    if (m.rows() != p->value.rows() || m.cols() != p->value.cols())
      throw CheckpointError(CheckpointErrorCode::Corrupt, "model checkpoint: array '" + p->name + "' has dims " +
                                                             dims_string(m.rows(), m.cols()));
    p->value = m;
  }
  model.freeze_expecting(ckpt.meta("model_digest"));
  return model;
}

VarianceSchedule schedule_from_checkpoint(const Checkpoint& ckpt, double eta) {
  return make_schedule(static_cast<int>(ckpt.scalar("schedule.T")), ckpt.scalar("schedule.beta_min"),
                       ckpt.scalar("schedule.beta_max"), eta);
}

Checkpoint classifier_checkpoint(const Classifier& clf, const TrainTrace& trace) {
  Checkpoint ckpt;
  for (const Tensor* p : clf.parameters()) ckpt.put_matrix(p->name, p->value);
  if (!trace.epoch_loss.empty()) {
    const Eigen::Map<const RowVector> loss(trace.epoch_loss.data(), static_cast<Eigen::Index>(trace.epoch_loss.size()));
    ckpt.put_matrix("train.epoch_loss", loss);
  }
  ckpt.scalars["classifier.dim"] = clf.dim();
  ckpt.scalars["classifier.num_classes"] = clf.num_classes();
  ckpt.scalars["classifier.hidden"] = clf.hidden();
  return ckpt;
}

Classifier classifier_from_checkpoint(const Checkpoint& ckpt) {
  Classifier clf(static_cast<int>(ckpt.scalar("classifier.dim")), static_cast<int>(ckpt.scalar("classifier.num_classes")),
                 static_cast<int>(ckpt.scalar("classifier.hidden")), 0);
  for (Tensor* p : clf.mutable_parameters()) {
    const Matrix m = ckpt.matrix(p->name);
    if (m.rows() != p->value.rows() || m.cols() != p->value.cols())
      throw CheckpointError(CheckpointErrorCode::Corrupt, "classifier checkpoint: array '" + p->name + "' has dims " +
                                                             dims_string(m.rows(), m.cols()));
    p->value = m;
  }
  return clf;
}

}  // namespace feddeo

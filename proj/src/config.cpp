#include "kdgan/config.hpp"

#include <fstream>
#include <map>
#include <optional>
#include <set>
#include <sstream>

#include <boost/property_tree/ini_parser.hpp>
#include <boost/property_tree/ptree.hpp>

#include "kdgan/losses.hpp"

namespace kdgan {

namespace pt = boost::property_tree;

namespace {

const std::map<std::string, std::set<std::string>>& known_keys() {
  static const std::map<std::string, std::set<std::string>> keys = {
      {"experiment", {"mode", "seed", "epochs", "batch_size", "eval_every", "init_checkpoint"}},
      {"data",
       {"source", "path", "num_classes", "train_size", "test_size", "difficulty", "data_seed", "augment", "flip", "pad",
        "crop"}},
      {"network", {"depth", "widen", "dropout", "bn_eps", "bn_momentum"}},
      {"teacher", {"logits", "checkpoint", "on_the_fly_dropout"}},
      {"kd", {"temperature"}},
      {"gan",
       {"use_supervised", "use_l1", "use_adversarial", "discriminator_depth", "discriminator_dropout",
        "discriminator_steps", "adversarial_form"}},
      {"optim", {"lr0", "momentum", "weight_decay", "milestones", "decay_factor"}},
      {"discriminator_optim", {"lr0", "momentum", "weight_decay", "milestones", "decay_factor"}},
  };
  return keys;
}

class Fields {
 public:
  explicit Fields(const pt::ptree& tree) : tree_(tree) {}

  std::optional<std::string> raw(const std::string& section, const std::string& key) const {
    auto s = tree_.get_child_optional(section);
    if (!s) return std::nullopt;
    auto v = s->get_optional<std::string>(pt::ptree::path_type(key, '\0'));
    if (!v) return std::nullopt;
    return *v;
  }

  template <typename T>
  void read(const std::string& section, const std::string& key, T& out) const {
    auto v = raw(section, key);
    if (!v) return;
    std::istringstream in(*v);
    T parsed{};
    if (!(in >> parsed) || !(in >> std::ws).eof()) {
      throw ConfigError(section + "." + key + ": cannot parse '" + *v + "'");
    }
    out = parsed;
  }

  void read(const std::string& section, const std::string& key, std::string& out) const {
    if (auto v = raw(section, key)) out = *v;
  }

  void read(const std::string& section, const std::string& key, bool& out) const {
    auto v = raw(section, key);
    if (!v) return;
    if (*v == "true" || *v == "1" || *v == "on") {
      out = true;
    } else if (*v == "false" || *v == "0" || *v == "off") {
      out = false;
    } else {
      throw ConfigError(section + "." + key + ": expected true or false, got '" + *v + "'");
    }
  }

  bool read_milestones(const std::string& section, std::vector<int>& out) const {
    auto v = raw(section, "milestones");
    if (!v) return false;
    out.clear();
    std::string item;
    std::istringstream in(*v);
    while (std::getline(in, item, ',')) {
      std::istringstream one(item);
      int m = 0;
      if (!(one >> m) || !(one >> std::ws).eof()) {
        throw ConfigError(section + ".milestones: cannot parse '" + *v + "'");
      }
      out.push_back(m);
    }
    return true;
  }

 private:
  const pt::ptree& tree_;
};

void check_known(const pt::ptree& tree) {
  for (const auto& [section, body] : tree) {
    auto it = known_keys().find(section);
    if (it == known_keys().end()) {
      if (body.empty()) throw ConfigError(section + ": keys must live inside a [section]");
      throw ConfigError("[" + section + "]: unknown section");
    }
    for (const auto& [key, value] : body) {
      if (!it->second.count(key)) throw ConfigError(section + "." + key + ": unknown key");
    }
  }
}

void read_sgd(const Fields& f, const std::string& section, int epochs, SgdConfig& cfg) {
  f.read(section, "lr0", cfg.lr0);
  f.read(section, "momentum", cfg.momentum);
  f.read(section, "weight_decay", cfg.weight_decay);
  f.read(section, "decay_factor", cfg.decay_factor);
  if (!f.read_milestones(section, cfg.milestones)) {
    cfg.milestones = {80, 160};
    cfg = cfg.rescaled(200, epochs);
  }
}

std::string join(const std::vector<int>& xs) {
  std::string out;
  for (std::size_t i = 0; i < xs.size(); ++i) {
    if (i) out += ',';
    out += std::to_string(xs[i]);
  }
  return out;
}

const char* flag(bool b) { return b ? "true" : "false"; }

}  // namespace

ExperimentConfig parse_config(const std::string& text, const std::vector<std::string>& overrides) {
  // read_ini drops sections without keys, so headers are checked on the raw text.
  std::istringstream lines(text);
  for (std::string line; std::getline(lines, line);) {
    const auto open = line.find_first_not_of(" \t");
    if (open == std::string::npos || line[open] != '[') continue;
    const auto close = line.find(']', open);
    if (close == std::string::npos) continue;
    const std::string section = line.substr(open + 1, close - open - 1);
    if (!known_keys().count(section)) throw ConfigError("[" + section + "]: unknown section");
  }
  pt::ptree tree;
  std::istringstream in(text);
  try {
    pt::read_ini(in, tree);
  } catch (const pt::ini_parser_error& e) {
    throw ConfigError(std::string("config: ") + e.what());
  }
  for (const auto& o : overrides) {
    const auto eq = o.find('=');
    const auto dot = o.find('.');
    if (eq == std::string::npos || dot == std::string::npos || dot > eq) {
      throw ConfigError("override '" + o + "': expected section.key=value");
    }
    const std::string section = o.substr(0, dot);
    const std::string key = o.substr(dot + 1, eq - dot - 1);
    tree.put_child(pt::ptree::path_type(section + '\0' + key, '\0'), pt::ptree(o.substr(eq + 1)));
  }
  check_known(tree);
  const Fields f(tree);

  ExperimentConfig cfg;
  std::string mode = to_string(cfg.mode);
  f.read("experiment", "mode", mode);
  cfg.mode = parse_run_mode(mode);
  f.read("experiment", "seed", cfg.seed);
  f.read("experiment", "epochs", cfg.epochs);
  f.read("experiment", "batch_size", cfg.batch_size);
  f.read("experiment", "eval_every", cfg.eval_every);
  f.read("experiment", "init_checkpoint", cfg.init_checkpoint);

  auto& d = cfg.data;
  f.read("data", "source", d.source);
  f.read("data", "path", d.path);
  f.read("data", "num_classes", d.num_classes);
  if (d.source == "cifar10") d.num_classes = 10;
  if (d.source == "cifar100") d.num_classes = 100;
  f.read("data", "train_size", d.train_size);
  f.read("data", "test_size", d.test_size);
  f.read("data", "difficulty", d.difficulty);
  f.read("data", "data_seed", d.data_seed);
  f.read("data", "augment", d.augment);
  f.read("data", "flip", d.augmentation.flip);
  f.read("data", "pad", d.augmentation.pad);
  f.read("data", "crop", d.augmentation.crop);

  auto& n = cfg.network;
  f.read("network", "depth", n.depth);
  f.read("network", "widen", n.widen);
  f.read("network", "dropout", n.dropout);
  f.read("network", "bn_eps", n.bn.eps);
  f.read("network", "bn_momentum", n.bn.momentum);
  n.num_classes = d.num_classes;

  f.read("teacher", "logits", cfg.logits_path);
  f.read("teacher", "checkpoint", cfg.teacher_checkpoint);
  f.read("teacher", "on_the_fly_dropout", cfg.teacher_on_the_fly);
  f.read("kd", "temperature", cfg.temperature);

  f.read("gan", "use_supervised", cfg.use_supervised);
  f.read("gan", "use_l1", cfg.use_l1);
  f.read("gan", "use_adversarial", cfg.use_adversarial);
  f.read("gan", "discriminator_depth", cfg.discriminator.depth);
  f.read("gan", "discriminator_dropout", cfg.discriminator.dropout);
  f.read("gan", "discriminator_steps", cfg.discriminator_steps);
  std::string form = "minimax";
  f.read("gan", "adversarial_form", form);
  if (form == "minimax") {
    cfg.adversarial_form = AdversarialForm::kMinimax;
  } else if (form == "non_saturating") {
    cfg.adversarial_form = AdversarialForm::kNonSaturating;
  } else {
    throw ConfigError("gan.adversarial_form: expected minimax or non_saturating, got '" + form + "'");
  }
  cfg.discriminator.num_classes = d.num_classes;
  cfg.discriminator.bn = n.bn;

  read_sgd(f, "optim", cfg.epochs, cfg.optim);
  read_sgd(f, "discriminator_optim", cfg.epochs, cfg.discriminator_optim);

  cfg.validate();
  return cfg;
}

ExperimentConfig parse_config(const std::string& text) { return parse_config(text, {}); }

ExperimentConfig load_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("config file " + path + " not found");
  std::stringstream buf;
  buf << in.rdbuf();
  return parse_config(buf.str());
}

std::string render_config(const ExperimentConfig& cfg) {
  std::ostringstream o;
  auto num = [](double v) { return format_scalar(v); };
  o << "[experiment]\n"
    << "mode = " << to_string(cfg.mode) << "\n"
    << "seed = " << cfg.seed << "\n"
    << "epochs = " << cfg.epochs << "\n"
    << "batch_size = " << cfg.batch_size << "\n"
    << "eval_every = " << cfg.eval_every << "\n"
    << "init_checkpoint = " << cfg.init_checkpoint << "\n\n";
  const auto& d = cfg.data;
  o << "[data]\n"
    << "source = " << d.source << "\n"
    << "path = " << d.path << "\n"
    << "num_classes = " << d.num_classes << "\n"
    << "train_size = " << d.train_size << "\n"
    << "test_size = " << d.test_size << "\n"
    << "difficulty = " << num(d.difficulty) << "\n"
    << "data_seed = " << d.data_seed << "\n"
    << "augment = " << flag(d.augment) << "\n"
    << "flip = " << flag(d.augmentation.flip) << "\n"
    << "pad = " << d.augmentation.pad << "\n"
    << "crop = " << d.augmentation.crop << "\n\n";
  const auto& n = cfg.network;
  o << "[network]\n"
    << "depth = " << n.depth << "\n"
    << "widen = " << n.widen << "\n"
    << "dropout = " << num(n.dropout) << "\n"
    << "bn_eps = " << num(n.bn.eps) << "\n"
    << "bn_momentum = " << num(n.bn.momentum) << "\n\n";
  o << "[teacher]\n"
    << "logits = " << cfg.logits_path << "\n"
    << "checkpoint = " << cfg.teacher_checkpoint << "\n"
    << "on_the_fly_dropout = " << flag(cfg.teacher_on_the_fly) << "\n\n";
  o << "[kd]\n"
    << "temperature = " << num(cfg.temperature) << "\n\n";
  o << "[gan]\n"
    << "use_supervised = " << flag(cfg.use_supervised) << "\n"
    << "use_l1 = " << flag(cfg.use_l1) << "\n"
    << "use_adversarial = " << flag(cfg.use_adversarial) << "\n"
    << "discriminator_depth = " << cfg.discriminator.depth << "\n"
    << "discriminator_dropout = " << num(cfg.discriminator.dropout) << "\n"
    << "discriminator_steps = " << cfg.discriminator_steps << "\n"
    << "adversarial_form = " << (cfg.adversarial_form == AdversarialForm::kMinimax ? "minimax" : "non_saturating")
    << "\n\n";
  auto sgd = [&](const char* section, const SgdConfig& s) {
    o << "[" << section << "]\n"
      << "lr0 = " << num(s.lr0) << "\n"
      << "momentum = " << num(s.momentum) << "\n"
      << "weight_decay = " << num(s.weight_decay) << "\n"
      << "milestones = " << join(s.milestones) << "\n"
      << "decay_factor = " << num(s.decay_factor) << "\n";
  };
  sgd("optim", cfg.optim);
  o << "\n";
  sgd("discriminator_optim", cfg.discriminator_optim);
  return o.str();
}

}  // namespace kdgan

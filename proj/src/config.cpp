#include "l2p/config.hpp"

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <stdexcept>

namespace l2p {

namespace fs = std::filesystem;

double parse_fraction(const std::string& text) {
  const auto slash = text.find('/');
  std::size_t used = 0;
  if (slash == std::string::npos) {
    const double v = std::stod(text, &used);
    if (used != text.size()) throw std::invalid_argument("bad number '" + text + "'");
    return v;
  }
  const std::string num = text.substr(0, slash), den = text.substr(slash + 1);
  const double n = std::stod(num, &used);
  if (used != num.size()) throw std::invalid_argument("bad fraction '" + text + "'");
  const double d = std::stod(den, &used);
  if (used != den.size() || d == 0.0) throw std::invalid_argument("bad fraction '" + text + "'");
  return n / d;
}

namespace {

std::string trim(std::string s) {
  const auto notspace = [](unsigned char c) { return !std::isspace(c); };
  s.erase(s.begin(), std::find_if(s.begin(), s.end(), notspace));
  s.erase(std::find_if(s.rbegin(), s.rend(), notspace).base(), s.end());
  return s;
}

bool parse_bool(const std::string& v) {
  if (v == "true" || v == "on" || v == "1" || v == "yes") return true;
  if (v == "false" || v == "off" || v == "0" || v == "no") return false;
  throw std::invalid_argument("bad boolean '" + v + "'");
}

std::vector<int> parse_int_list(const std::string& v) {
  std::vector<int> out;
  std::stringstream ss(v);
  std::string tok;
  while (std::getline(ss, tok, ',')) {
    tok = trim(tok);
    if (!tok.empty()) out.push_back(std::stoi(tok));
  }
  return out;
}

std::vector<double> parse_double_list(const std::string& v) {
  std::vector<double> out;
  std::stringstream ss(v);
  std::string tok;
  while (std::getline(ss, tok, ',')) {
    tok = trim(tok);
    if (!tok.empty()) out.push_back(parse_fraction(tok));
  }
  return out;
}

std::vector<std::string> parse_string_list(const std::string& v) {
  std::vector<std::string> out;
  std::stringstream ss(v);
  std::string tok;
  while (std::getline(ss, tok, ',')) {
    tok = trim(tok);
    if (!tok.empty()) out.push_back(tok);
  }
  return out;
}

std::string join_ints(const std::vector<int>& v) {
  std::string out;
  for (std::size_t i = 0; i < v.size(); ++i) {
    if (i) out += ",";
    out += std::to_string(v[i]);
  }
  return out;
}

std::string fmt_double(double v) {
  std::ostringstream os;
  os.precision(17);
  os << v;
  return os.str();
}

std::string join_doubles(const std::vector<double>& v) {
  std::string out;
  for (std::size_t i = 0; i < v.size(); ++i) {
    if (i) out += ",";
    out += fmt_double(v[i]);
  }
  return out;
}

std::string join_strings(const std::vector<std::string>& v) {
  std::string out;
  for (std::size_t i = 0; i < v.size(); ++i) {
    if (i) out += ",";
    out += v[i];
  }
  return out;
}

}  // namespace

void ExperimentConfig::set(const std::string& dotted_key, const std::string& raw) {
  const auto dot = dotted_key.find('.');
  if (dot == std::string::npos)
    throw std::invalid_argument("config: key '" + dotted_key + "' must be section.key");
  const std::string section = dotted_key.substr(0, dot);
  const std::string key = dotted_key.substr(dot + 1);
  const std::string v = trim(raw);

  auto unknown = [&]() -> std::invalid_argument {
    return std::invalid_argument("config: unknown key '" + section + "." + key + "'");
  };

  if (section == "experiment") {
    if (key == "seed") seed = std::stoull(v);
    else if (key == "output_dir") output_dir = v;
    else if (key == "repeats") repeats = std::stoi(v);
    else throw unknown();
  } else if (section == "data") {
    if (key == "dataset") dataset = v;
    else if (key == "root") data_root = v;
    else if (key == "subset") subset = std::stoi(v);
    else if (key == "test_subset") test_subset = std::stoi(v);
    else if (key == "augment") augment = parse_bool(v);
    else if (key == "synth_train") synth_train = std::stoi(v);
    else if (key == "synth_test") synth_test = std::stoi(v);
    else if (key == "synth_classes") synth_classes = std::stoi(v);
    else throw unknown();
  } else if (section == "model") {
    if (key == "arch") arch = v;
    else if (key == "base_channels") base_channels = std::stoi(v);
    else if (key == "blocks_per_stage") blocks_per_stage = std::stoi(v);
    else if (key == "stem_stride") stem_stride = std::stoi(v);
    else if (key == "mlp_widths") mlp_widths = parse_int_list(v);
    else if (key == "mlp_perturb") mlp_perturb = parse_bool(v);
    else if (key == "normalize_mean") normalize_mean = parse_double_list(v);
    else if (key == "normalize_std") normalize_std = parse_double_list(v);
    else if (key == "theta0") theta0 = parse_fraction(v);
    else if (key == "theta_min") theta_min = parse_fraction(v);
    else throw unknown();
  } else if (section == "train") {
    if (key == "mode") train.mode = train_mode_from_string(v);
    else if (key == "epochs") train.epochs = std::stoi(v);
    else if (key == "batch_size") train.batch_size = std::stoi(v);
    else if (key == "lr") train.lr = parse_fraction(v);
    else if (key == "milestones") train.milestones = parse_int_list(v);
    else if (key == "lr_decay") train.lr_decay = parse_fraction(v);
    else if (key == "momentum") train.momentum = parse_fraction(v);
    else if (key == "nesterov") train.nesterov = parse_bool(v);
    else if (key == "weight_decay") train.weight_decay = parse_fraction(v);
    else if (key == "gamma") train.gamma = parse_fraction(v);
    else if (key == "alpha") train.alpha = parse_fraction(v);
    else if (key == "beta") train.beta = parse_fraction(v);
    else if (key == "warmup_epochs") train.warmup_epochs = std::stoi(v);
    else if (key == "adv_train") train.adv_train = parse_bool(v);
    else if (key == "adv_eps") train.adv.eps = parse_fraction(v);
    else if (key == "adv_steps") train.adv.steps = std::stoi(v);
    else if (key == "adv_step_size") train.adv.step_size = parse_fraction(v);
    else if (key == "adv_random_start") train.adv.random_start = parse_bool(v);
    else if (key == "alternation")
      train.alternation = v == "epoch" ? Alternation::kPerEpoch : Alternation::kPerBatch;
    else if (key == "isolation_check") train.isolation_check = parse_bool(v);
    else if (key == "log_every") train.log_every = std::stoi(v);
    else throw unknown();
  } else if (section == "attacks") {
    if (key == "list") attack_list = parse_string_list(v);
    else if (key == "eps") eps = parse_fraction(v);
    else if (key == "pgd_steps") pgd_steps = std::stoi(v);
    else if (key == "pgd_step_size") pgd_step_size = parse_fraction(v);
    else if (key == "pgd_random_start") pgd_random_start = parse_bool(v);
    else if (key == "cw_c_lo") cw_c_lo = parse_fraction(v);
    else if (key == "cw_c_hi") cw_c_hi = parse_fraction(v);
    else if (key == "cw_binary_steps") cw_binary_steps = std::stoi(v);
    else if (key == "cw_max_iters") cw_max_iters = std::stoi(v);
    else if (key == "cw_lr") cw_lr = parse_fraction(v);
    else if (key == "cw_kappa") cw_kappa = parse_fraction(v);
    else if (key == "cw_kappa_sweep") cw_kappa_sweep = parse_double_list(v);
    else if (key == "fewpixel_k") fewpixel_k = std::stoi(v);
    else if (key == "fewpixel_pop") fewpixel_pop = std::stoi(v);
    else if (key == "fewpixel_gens") fewpixel_gens = std::stoi(v);
    else if (key == "eot_samples") eot_samples = std::stoi(v);
    else if (key == "samples") attack_samples = std::stoi(v);
    else throw unknown();
  } else {
    throw std::invalid_argument("config: unknown section '" + section + "'");
  }
}

ExperimentConfig ExperimentConfig::from_text(const std::string& text) {
  ExperimentConfig cfg;
  std::istringstream is(text);
  std::string line, section;
  int lineno = 0;
  while (std::getline(is, line)) {
    ++lineno;
    const auto hash = line.find('#');
    if (hash != std::string::npos) line = line.substr(0, hash);
    line = trim(line);
    if (line.empty()) continue;
    if (line.front() == '[') {
      if (line.back() != ']')
        throw std::invalid_argument("config line " + std::to_string(lineno) + ": bad section");
      section = trim(line.substr(1, line.size() - 2));
      continue;
    }
    const auto eq = line.find('=');
    if (eq == std::string::npos)
      throw std::invalid_argument("config line " + std::to_string(lineno) + ": expected key=value");
    if (section.empty())
      throw std::invalid_argument("config line " + std::to_string(lineno) + ": key outside section");
    cfg.set(section + "." + trim(line.substr(0, eq)), trim(line.substr(eq + 1)));
  }
  return cfg;
}

ExperimentConfig ExperimentConfig::from_file(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw std::runtime_error("config: cannot open " + path);
  std::ostringstream ss;
  ss << f.rdbuf();
  return from_text(ss.str());
}

std::string ExperimentConfig::to_text() const {
  std::ostringstream os;
  os << "[experiment]\n";
  os << "seed = " << seed << "\n";
  os << "output_dir = " << output_dir << "\n";
  os << "repeats = " << repeats << "\n";
  os << "\n[data]\n";
  os << "dataset = " << dataset << "\n";
  os << "root = " << data_root << "\n";
  os << "subset = " << subset << "\n";
  os << "test_subset = " << test_subset << "\n";
  os << "augment = " << (augment ? "true" : "false") << "\n";
  os << "synth_train = " << synth_train << "\n";
  os << "synth_test = " << synth_test << "\n";
  os << "synth_classes = " << synth_classes << "\n";
  os << "\n[model]\n";
  os << "arch = " << arch << "\n";
  os << "base_channels = " << base_channels << "\n";
  os << "blocks_per_stage = " << blocks_per_stage << "\n";
  os << "stem_stride = " << stem_stride << "\n";
  os << "mlp_widths = " << join_ints(mlp_widths) << "\n";
  os << "mlp_perturb = " << (mlp_perturb ? "true" : "false") << "\n";
  os << "normalize_mean = " << join_doubles(normalize_mean) << "\n";
  os << "normalize_std = " << join_doubles(normalize_std) << "\n";
  os << "theta0 = " << fmt_double(theta0) << "\n";
  os << "theta_min = " << fmt_double(theta_min) << "\n";
  os << "\n[train]\n";
  os << "mode = " << to_string(train.mode) << "\n";
  os << "epochs = " << train.epochs << "\n";
  os << "batch_size = " << train.batch_size << "\n";
  os << "lr = " << fmt_double(train.lr) << "\n";
  os << "milestones = " << join_ints(train.milestones) << "\n";
  os << "lr_decay = " << fmt_double(train.lr_decay) << "\n";
  os << "momentum = " << fmt_double(train.momentum) << "\n";
  os << "nesterov = " << (train.nesterov ? "true" : "false") << "\n";
  os << "weight_decay = " << fmt_double(train.weight_decay) << "\n";
  os << "gamma = " << fmt_double(train.gamma) << "\n";
  os << "alpha = " << fmt_double(train.alpha) << "\n";
  os << "beta = " << fmt_double(train.beta) << "\n";
  os << "warmup_epochs = " << train.warmup_epochs << "\n";
  os << "adv_train = " << (train.adv_train ? "true" : "false") << "\n";
  os << "adv_eps = " << fmt_double(train.adv.eps) << "\n";
  os << "adv_steps = " << train.adv.steps << "\n";
  os << "adv_step_size = " << fmt_double(train.adv.step_size) << "\n";
  os << "adv_random_start = " << (train.adv.random_start ? "true" : "false") << "\n";
  os << "alternation = " << (train.alternation == Alternation::kPerEpoch ? "epoch" : "batch")
     << "\n";
  os << "isolation_check = " << (train.isolation_check ? "true" : "false") << "\n";
  os << "log_every = " << train.log_every << "\n";
  os << "\n[attacks]\n";
  os << "list = " << join_strings(attack_list) << "\n";
  os << "eps = " << fmt_double(eps) << "\n";
  os << "pgd_steps = " << pgd_steps << "\n";
  os << "pgd_step_size = " << fmt_double(pgd_step_size) << "\n";
  os << "pgd_random_start = " << (pgd_random_start ? "true" : "false") << "\n";
  os << "cw_c_lo = " << fmt_double(cw_c_lo) << "\n";
  os << "cw_c_hi = " << fmt_double(cw_c_hi) << "\n";
  os << "cw_binary_steps = " << cw_binary_steps << "\n";
  os << "cw_max_iters = " << cw_max_iters << "\n";
  os << "cw_lr = " << fmt_double(cw_lr) << "\n";
  os << "cw_kappa = " << fmt_double(cw_kappa) << "\n";
  os << "cw_kappa_sweep = " << join_doubles(cw_kappa_sweep) << "\n";
  os << "fewpixel_k = " << fewpixel_k << "\n";
  os << "fewpixel_pop = " << fewpixel_pop << "\n";
  os << "fewpixel_gens = " << fewpixel_gens << "\n";
  os << "eot_samples = " << eot_samples << "\n";
  os << "samples = " << attack_samples << "\n";
  return os.str();
}

std::string ExperimentConfig::digest() const {
  const std::string text = to_text();
  std::uint64_t h = 1469598103934665603ull;
  for (char c : text) {
    h ^= static_cast<unsigned char>(c);
    h *= 1099511628211ull;
  }
  char buf[17];
  std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

std::string ExperimentConfig::resolved_data_dir() const {
  std::string root = data_root;
  if (const char* env = std::getenv("L2P_DATA_ROOT"); env && *env) root = env;
  if (dataset == "synthetic") {
    std::ostringstream os;
    os << root << "/synthetic-c" << synth_classes << "-n" << synth_train << "x" << synth_test
       << "-s" << seed;
    return os.str();
  }
  return root + "/" + dataset;
}

Dataset ExperimentConfig::load_split(const std::string& split) const {
  const std::string dir = resolved_data_dir();
  Dataset ds;
  if (dataset == "synthetic") {
    if (!fs::exists(dir + "/data_batch_1.bin"))
      write_synthetic_cifar10(dir, synth_train, synth_test, synth_classes, seed);
    ds = load_cifar(dir, 10, split);
    ds.class_count = synth_classes;
  } else if (dataset == "cifar10") {
    ds = load_cifar(dir, 10, split);
  } else if (dataset == "cifar100") {
    ds = load_cifar(dir, 100, split);
  } else if (dataset == "mnist") {
    ds = load_mnist(dir, split);
  } else {
    throw std::invalid_argument("config: unknown dataset '" + dataset + "'");
  }
  const int want = split == "train" ? subset : test_subset;
  if (want > 0 && static_cast<std::size_t>(want) < ds.count())
    ds = subset_wrapper(ds, static_cast<std::size_t>(want));
  return ds;
}

Dataset ExperimentConfig::load_train() const { return load_split("train"); }
Dataset ExperimentConfig::load_test() const { return load_split("test"); }

Model ExperimentConfig::build_model_from_config() const {
  Shape input;
  int classes;
  if (dataset == "mnist") {
    input = {1, 28, 28};
    classes = 10;
  } else {
    input = {3, 32, 32};
    classes = dataset == "cifar100" ? 100 : (dataset == "synthetic" ? synth_classes : 10);
  }
  std::vector<LayerSpec> spec;
  if (arch == "mini-v1" || arch == "mini-v2") {
    std::vector<double> mean = normalize_mean, stdv = normalize_std;
    if (!mean.empty() && mean.size() != static_cast<std::size_t>(input[0]))
      throw std::invalid_argument("config: normalize constants must match input channels");
    spec = arch == "mini-v1"
               ? mini_v1_spec(base_channels, blocks_per_stage, classes, stem_stride, mean, stdv)
               : mini_v2_spec(base_channels, blocks_per_stage, classes, stem_stride, mean, stdv);
  } else if (arch == "mlp") {
    std::vector<int> widths = mlp_widths;
    if (widths.empty() || widths.back() != classes)
      throw std::invalid_argument("config: mlp_widths must end at the class count " +
                                  std::to_string(classes));
    widths.insert(widths.begin(), input[0] * input[1] * input[2]);
    spec = mlp_spec(widths, mlp_perturb);
    spec.insert(spec.begin(), LayerSpec::flatten());
    // flattened [D] models need a flattened entry point; keep [C,H,W] input
  } else {
    throw std::invalid_argument("config: unknown arch '" + arch + "'");
  }
  return build_model(std::move(spec), std::move(input), derive_seed(seed, "model"), theta0,
                     theta_min);
}

AttackConfig ExperimentConfig::make_attack(const std::string& name) const {
  if (name == "fgsm") return AttackConfig{FgsmConfig{.eps = eps}};
  if (name == "pgd")
    return AttackConfig{PgdConfig{.eps = eps,
                                  .steps = pgd_steps,
                                  .step_size = pgd_step_size,
                                  .random_start = pgd_random_start}};
  if (name == "cw")
    return AttackConfig{CwConfig{.c_lo = cw_c_lo,
                                 .c_hi = cw_c_hi,
                                 .binary_steps = cw_binary_steps,
                                 .max_iters = cw_max_iters,
                                 .lr = cw_lr,
                                 .kappa = cw_kappa}};
  if (name == "fewpixel")
    return AttackConfig{FewPixelConfig{.k = fewpixel_k,
                                       .pop_size = fewpixel_pop,
                                       .max_gens = fewpixel_gens,
                                       .seed = derive_seed(seed, "fewpixel")}};
  if (name == "eot-pgd" || name == "eot-fgsm")
    return AttackConfig{EotConfig{.inner = PgdConfig{.eps = eps,
                                                     .steps = pgd_steps,
                                                     .step_size = pgd_step_size,
                                                     .random_start = pgd_random_start},
                                  .samples = eot_samples,
                                  .single_step = name == "eot-fgsm"}};
  throw std::invalid_argument("config: unknown attack '" + name +
                              "' (fgsm|pgd|cw|fewpixel|eot-pgd|eot-fgsm)");
}

// helper kept out of the header
Dataset ExperimentConfig::subset_wrapper(const Dataset& ds, std::size_t n) const {
  return subset(ds, n, derive_seed(seed, "subset-" + ds.split));
}

// ---------------------------------------------------------------------------
// Presets

namespace {

ExperimentConfig desk_base() {
  ExperimentConfig c;
  c.seed = 1;
  c.repeats = 5;
  c.dataset = "synthetic";
  c.subset = 5000;
  c.test_subset = 1000;
  c.synth_train = 6000;
  c.synth_test = 1000;
  c.arch = "mini-v1";
  c.base_channels = 16;
  c.blocks_per_stage = 1;
  c.stem_stride = 2;
  c.normalize_mean = {0.5, 0.5, 0.5};
  c.normalize_std = {0.25, 0.25, 0.25};
  c.train.epochs = 40;
  c.train.batch_size = 128;
  c.train.lr = 0.1;
  c.train.milestones = {20, 32};
  c.train.lr_decay = 0.1;
  c.train.warmup_epochs = 8;
  c.train.gamma = 1e-4;
  c.train.alpha = 0.5;
  c.train.beta = 0.5;
  c.train.adv_train = true;
  c.train.adv = {.eps = 8.0 / 255.0, .steps = 3, .step_size = 0.01, .random_start = true};
  c.eps = 8.0 / 255.0;
  c.pgd_steps = 7;
  c.pgd_step_size = 0.01;
  return c;
}

ExperimentConfig paper_base() {
  ExperimentConfig c;
  c.seed = 1;
  c.repeats = 5;
  c.dataset = "cifar10";
  c.data_root = "data";
  c.subset = 0;
  c.test_subset = 0;
  c.arch = "mini-v1";
  c.base_channels = 16;
  c.blocks_per_stage = 2;
  c.stem_stride = 1;
  c.normalize_mean = {0.4914, 0.4822, 0.4465};
  c.normalize_std = {0.2470, 0.2435, 0.2616};
  c.train.epochs = 350;
  c.train.batch_size = 128;
  c.train.lr = 0.1;
  c.train.milestones = {150, 250};
  c.train.lr_decay = 0.1;
  c.train.momentum = 0.9;
  c.train.nesterov = true;
  c.train.weight_decay = 1e-4;
  c.train.warmup_epochs = 20;
  c.train.gamma = 1e-4;
  c.train.alpha = 0.5;
  c.train.beta = 0.5;
  c.train.adv_train = true;
  c.train.adv = {.eps = 8.0 / 255.0, .steps = 7, .step_size = 0.01, .random_start = true};
  c.eps = 8.0 / 255.0;
  c.pgd_steps = 7;
  c.pgd_step_size = 0.01;
  return c;
}

ExperimentConfig tiny_base() {
  ExperimentConfig c;
  c.seed = 1;
  c.repeats = 3;
  c.dataset = "synthetic";
  c.synth_train = 200;
  c.synth_test = 60;
  c.synth_classes = 4;
  c.subset = 0;
  c.test_subset = 0;
  c.arch = "mini-v1";
  c.base_channels = 8;
  c.blocks_per_stage = 1;
  c.stem_stride = 2;
  c.normalize_mean = {0.5, 0.5, 0.5};
  c.normalize_std = {0.25, 0.25, 0.25};
  c.train.epochs = 3;
  c.train.batch_size = 32;
  c.train.lr = 0.05;
  c.train.milestones = {};
  c.train.warmup_epochs = 1;
  c.train.adv = {.eps = 8.0 / 255.0, .steps = 2, .step_size = 0.01, .random_start = true};
  c.eps = 8.0 / 255.0;
  c.pgd_steps = 3;
  return c;
}

}  // namespace

ExperimentConfig ExperimentConfig::preset(const std::string& name) {
  if (name == "paper-cifar10-l2p") {
    auto c = paper_base();
    c.train.mode = TrainMode::kL2p;
    c.output_dir = "runs/paper-l2p";
    return c;
  }
  if (name == "paper-cifar10-vanilla") {
    auto c = paper_base();
    c.train.mode = TrainMode::kVanilla;
    c.train.alpha = 0.0;
    c.train.beta = 1.0;
    c.output_dir = "runs/paper-vanilla";
    return c;
  }
  if (name == "desk-l2p") {
    auto c = desk_base();
    c.train.mode = TrainMode::kL2p;
    c.output_dir = "runs/desk-l2p";
    return c;
  }
  if (name == "desk-l2p-r") {
    auto c = desk_base();
    c.train.mode = TrainMode::kL2pR;
    c.output_dir = "runs/desk-l2p-r";
    return c;
  }
  if (name == "desk-pni") {
    auto c = desk_base();
    c.train.mode = TrainMode::kPniStyle;
    c.output_dir = "runs/desk-pni";
    return c;
  }
  if (name == "desk-vanilla") {
    auto c = desk_base();
    c.train.mode = TrainMode::kVanilla;
    c.train.alpha = 0.0;
    c.train.beta = 1.0;
    c.output_dir = "runs/desk-vanilla";
    return c;
  }
  if (name == "desk-none") {
    auto c = desk_base();
    c.train.mode = TrainMode::kNone;
    c.train.alpha = 1.0;
    c.train.beta = 0.0;
    c.train.adv_train = false;
    c.output_dir = "runs/desk-none";
    return c;
  }
  if (name == "tiny-repro") {
    auto c = tiny_base();
    c.train.mode = TrainMode::kL2p;
    c.output_dir = "runs/tiny";
    return c;
  }
  throw std::invalid_argument("config: unknown preset '" + name + "'");
}

std::vector<std::string> ExperimentConfig::preset_names() {
  return {"paper-cifar10-l2p", "paper-cifar10-vanilla", "desk-l2p", "desk-l2p-r",
          "desk-pni",          "desk-vanilla",          "desk-none", "tiny-repro"};
}

}  // namespace l2p

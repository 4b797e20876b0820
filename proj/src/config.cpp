#include "pixcon/config.hpp"

#include <charconv>
#include <fstream>
#include <sstream>

namespace pixcon {

namespace {

std::vector<ConfigKey> make_keys() {
  return {
      // run
      {"seed", "0", "", "Seed for initialization, sampling and augmentation"},
      {"data", "data", "", "Dataset root (images/, labels/, splits/)"},
      {"out", "runs", "", "Output directory for checkpoints, CSVs and pseudo-labels"},
      {"checkpoint", "", "", "Input checkpoint for finetune, eval, pseudo-label and dump-embeddings"},
      {"split", "val", "", "Split evaluated or embedded (train|val)"},
      {"verbose", "false", "", "Progress lines on stderr"},
      // synthetic data
      {"n", "64", "", "Synthetic training images"},
      {"n_val", "64", "", "Synthetic validation images"},
      {"image_size", "64", "513", "Synthetic image side in pixels"},
      {"num_classes", "6", "21", "Classes including background"},
      {"background_class", "0", "0", "Background class id, or 'none'"},
      {"min_shapes", "1", "", "Fewest shapes per synthetic image"},
      {"max_shapes", "4", "", "Most shapes per synthetic image"},
      {"min_radius", "10", "", "Smallest shape half-extent"},
      {"max_radius", "20", "", "Largest shape half-extent"},
      {"color_noise", "0.12", "", "Per-shape uniform shift of each channel around the class color"},
      {"pixel_noise", "0.05", "", "Per-pixel Gaussian noise standard deviation"},
      // model
      {"channels", "32,64,64,64", "", "Encoder conv widths, one 3x3 conv each"},
      {"strides", "2,2,1,1", "", "Encoder conv strides (product must be 4)"},
      {"feature_dim", "64", "2048", "Encoder output channels D"},
      {"projection_width", "256", "256", "Width of the three 1x1 projection convs"},
      // contrastive loss
      {"variant", "within", "", "Contrastive loss: within|cross|batch"},
      {"tau", "0.07", "0.07", "Contrastive temperature"},
      {"batch_samples", "10000", "10000", "Pixels sampled by the batch loss"},
      {"distort_probability", "0.8", "0.8", "Probability of color distortion per image"},
      {"flip_probability", "0.5", "0.5", "Probability of a horizontal flip"},
      {"scale_lo", "0.5", "0.5", "Smallest random rescale factor"},
      {"scale_hi", "2.0", "2.0", "Largest random rescale factor"},
      {"crop_size", "65", "513", "Training crop side"},
      {"batch_size", "8", "16", "Images per step"},
      {"momentum", "0.9", "0.9", "SGD momentum"},
      {"weight_decay", "4e-5", "4e-5", "Weight decay on conv weights"},
      {"eval_every", "100", "", "Log (and evaluate) every this many steps; 0 = only at the end"},
      // stages
      {"pretrain_steps", "2000", "300000", "Contrastive pretraining steps"},
      {"pretrain_lr", "0.1", "0.1", "Initial pretraining learning rate (cosine decay)"},
      {"finetune_steps", "2000", "300000", "Fine-tuning steps"},
      {"finetune_lr", "0.007", "0.007", "Initial fine-tuning learning rate"},
      {"ce_steps", "2000", "300000", "CE-only steps"},
      {"ce_lr", "0.03", "0.03", "Initial CE-only learning rate"},
      {"joint_steps", "2000", "300000", "Joint-training steps"},
      {"joint_lr", "0.03", "0.03", "Initial joint-training learning rate"},
      {"lambda", "1.0", "", "Weight of the contrastive term in joint training"},
      {"method", "within", "", "Pipeline: ce_only|within|cross|batch"},
      // pseudo-labels
      {"threshold", "0.8", "0.8", "Pseudo-label confidence threshold"},
      {"background_threshold", "0.97", "0.97", "Pseudo-label threshold of the background class"},
      {"labeled", "8", "", "Labeled images used by semisup (the rest of train is unlabeled)"},
      // sweep
      {"budgets", "8,128", "", "Labeled-image budgets of the sweep"},
      {"seeds", "5", "", "Seeds per sweep cell"},
      {"variants", "ce_only,within,cross,batch", "", "Methods of the sweep"},
  };
}

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

std::vector<std::string> split_commas(const std::string& s) {
  std::vector<std::string> out;
  std::stringstream in(s);
  std::string item;
  while (std::getline(in, item, ',')) {
    item = trim(item);
    if (!item.empty()) out.push_back(item);
  }
  return out;
}

template <typename T>
T parse_number(const std::string& key, const std::string& v) {
  T out{};
  const auto [ptr, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
  if (ec != std::errc() || ptr != v.data() + v.size()) {
    throw ConfigError("config: " + key + " = '" + v + "' is not a valid number");
  }
  return out;
}

AugmentConfig augment_from(const Config& c, AugmentConfig a) {
  a.distort_probability = c.real("distort_probability");
  a.flip_probability = c.real("flip_probability");
  a.flip = a.flip_probability > 0.0;
  a.scale_lo = c.real("scale_lo");
  a.scale_hi = c.real("scale_hi");
  a.crop_size = c.count("crop_size");
  return a;
}

TrainConfig stage_config(const Config& c, Stage stage, const std::string& prefix) {
  TrainConfig t;
  t.stage = stage;
  t.steps = c.count(prefix + "_steps");
  t.lr0 = c.real(prefix + "_lr");
  t.batch_size = c.count("batch_size");
  t.sgd.momentum = c.real("momentum");
  t.sgd.weight_decay = c.real("weight_decay");
  t.seed = c.u64("seed");
  t.eval_every = c.count("eval_every");
  t.contrast = contrast_config(c);
  t.joint.lambda_contrast = c.real("lambda");
  t.model = model_spec(c);
  t.verbose = c.flag("verbose");
  const bool color = stage == Stage::pretrain;
  t.augment = augment_from(c, color ? pretrain_augment() : finetune_augment());
  t.partner_augment = augment_from(c, pretrain_augment());
  t.validate();
  return t;
}

}  // namespace

const std::vector<ConfigKey>& config_keys() {
  static const std::vector<ConfigKey> keys = make_keys();
  return keys;
}

const ConfigKey* find_config_key(const std::string& name) {
  for (const auto& k : config_keys()) {
    if (k.name == name) return &k;
  }
  return nullptr;
}

Config::Config() {
  for (const auto& k : config_keys()) values_[k.name] = k.default_value;
}

Config Config::full_scale_preset() {
  Config c;
  for (const auto& k : config_keys()) {
    if (!k.full_scale_value.empty()) c.values_[k.name] = k.full_scale_value;
  }
  return c;
}

void Config::set(const std::string& key, const std::string& value) {
  if (!find_config_key(key)) throw ConfigError("config: unknown key '" + key + "'");
  values_[key] = trim(value);
}

const std::string& Config::text(const std::string& key) const {
  auto it = values_.find(key);
  if (it == values_.end()) throw ConfigError("config: unknown key '" + key + "'");
  return it->second;
}

double Config::real(const std::string& key) const {
  const std::string& v = text(key);
  try {
    std::size_t used = 0;
    const double d = std::stod(v, &used);
    if (used == v.size()) return d;
  } catch (const std::exception&) {
  }
  throw ConfigError("config: " + key + " = '" + v + "' is not a valid number");
}

std::size_t Config::count(const std::string& key) const { return parse_number<std::size_t>(key, text(key)); }

std::uint64_t Config::u64(const std::string& key) const { return parse_number<std::uint64_t>(key, text(key)); }

bool Config::flag(const std::string& key) const {
  const std::string& v = text(key);
  if (v == "true" || v == "1" || v == "yes" || v == "on") return true;
  if (v == "false" || v == "0" || v == "no" || v == "off") return false;
  throw ConfigError("config: " + key + " = '" + v + "' is not a boolean");
}

std::vector<std::size_t> Config::counts(const std::string& key) const {
  std::vector<std::size_t> out;
  for (const auto& w : split_commas(text(key))) out.push_back(parse_number<std::size_t>(key, w));
  return out;
}

std::vector<std::string> Config::words(const std::string& key) const { return split_commas(text(key)); }

void Config::load_file(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("config: cannot open " + path.string());
  std::stringstream s;
  s << in.rdbuf();
  load_text(s.str(), path.string());
}

void Config::load_text(const std::string& text, const std::string& origin) {
  std::istringstream in(text);
  std::string line;
  std::size_t number = 0;
  while (std::getline(in, line)) {
    ++number;
    if (const auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
    line = trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) {
      throw ConfigError("config: " + origin + ":" + std::to_string(number) + ": expected 'key = value'");
    }
    const std::string key = trim(line.substr(0, eq));
    if (!find_config_key(key)) {
      throw ConfigError("config: " + origin + ":" + std::to_string(number) + ": unknown key '" + key + "'");
    }
    values_[key] = trim(line.substr(eq + 1));
  }
}

std::string Config::dump() const {
  std::string out;
  for (const auto& k : config_keys()) out += k.name + " = " + values_.at(k.name) + "\n";
  return out;
}

SynthConfig synth_config(const Config& c) {
  SynthConfig s;
  s.image_size = c.count("image_size");
  s.num_classes = c.count("num_classes");
  s.min_shapes = c.count("min_shapes");
  s.max_shapes = c.count("max_shapes");
  s.min_radius = c.real("min_radius");
  s.max_radius = c.real("max_radius");
  s.color_noise = c.real("color_noise");
  s.pixel_noise = c.real("pixel_noise");
  s.seed = c.u64("seed");
  s.validate();
  return s;
}

ModelSpec model_spec(const Config& c) {
  ModelSpec m;
  m.encoder.channels = c.counts("channels");
  m.encoder.strides = c.counts("strides");
  m.encoder.feature_dim = c.count("feature_dim");
  m.head.projection_width = c.count("projection_width");
  m.head.num_classes = c.count("num_classes");
  m.encoder.validate();
  return m;
}

ContrastConfig contrast_config(const Config& c) {
  ContrastConfig cc;
  cc.tau = c.real("tau");
  cc.variant = parse_contrast_variant(c.text("variant"));
  cc.batch_sample_count = c.count("batch_samples");
  cc.batch_sample_seed = c.u64("seed");
  cc.validate();
  return cc;
}

TrainConfig pretrain_config(const Config& c) { return stage_config(c, Stage::pretrain, "pretrain"); }
TrainConfig finetune_config(const Config& c) { return stage_config(c, Stage::finetune, "finetune"); }
TrainConfig ce_config(const Config& c) { return stage_config(c, Stage::ce_only, "ce"); }
TrainConfig joint_config(const Config& c) { return stage_config(c, Stage::joint, "joint"); }

PipelineConfig pipeline_config(const Config& c) {
  PipelineConfig p;
  p.method = parse_method(c.text("method"));
  p.pretrain = pretrain_config(c);
  p.finetune = finetune_config(c);
  p.ce_only = ce_config(c);
  return p;
}

PseudoLabelConfig pseudo_label_config(const Config& c) {
  PseudoLabelConfig p;
  p.threshold_default = c.real("threshold");
  p.background_threshold = c.real("background_threshold");
  const std::string& bg = c.text("background_class");
  if (bg != "none") p.background_class = static_cast<std::uint8_t>(parse_number<unsigned>("background_class", bg));
  p.validate();
  return p;
}

}  // namespace pixcon

#include "xcot/config.hpp"

#include <fstream>
#include <sstream>

#include "xcot/error.hpp"
#include "xcot/util.hpp"

namespace xcot::config {

void RunConfig::check() const {
  if (profile != "quick" && profile != "paper-analog") {
    throw ConfigError("unknown profile '" + profile + "'");
  }
  policy.check();
  sft.check();
  grpo.check();
  rewards.check();
  if (eval.decode.samples_per_case == 0) throw ConfigError("eval.samples_per_case must be >= 1");
  if (!(eval.decode.temperature >= 0.0)) throw ConfigError("eval.temperature must be >= 0");
}

void RunConfig::set_threads(unsigned threads) {
  if (threads == 0) throw ConfigError("threads must be >= 1");
  sft.threads = threads;
  grpo.threads = threads;
  eval.decode.threads = threads;
}

RunConfig make_profile(std::string_view name) {
  RunConfig c;
  c.profile = std::string(name);
  if (name == "quick") {
    c.policy.d_model = 64;
    c.policy.n_layers = 2;
    c.policy.n_heads = 4;
    c.sft.steps = 4000;
    c.sft.learning_rate = 3e-4;
    c.grpo.steps = 500;
    c.grpo.learning_rate = 1e-5;
  } else if (name == "paper-analog") {
    c.policy.d_model = 128;
    c.policy.n_layers = 4;
    c.policy.n_heads = 4;
    c.sft.steps = 16000;
    c.sft.learning_rate = 3e-4;
    c.grpo.steps = 500;
    c.grpo.learning_rate = 1e-5;
  } else {
    throw ConfigError("unknown profile '" + std::string(name) + "'");
  }
  return c;
}

nlohmann::json to_json(const RunConfig& c) {
  auto sft = sft::to_json(c.sft);
  sft.erase("schedule");
  sft.erase("loss_masking");
  const auto& d = c.eval.decode;
  return {{"profile", c.profile},
          {"world", {{"n_train", c.world.n_train}, {"n_eval", c.world.n_eval}, {"seed", c.world.seed}}},
          {"policy", policy::to_json(c.policy)},
          {"sft", sft},
          {"grpo", grpo::to_json(c.grpo)},
          {"rewards",
           {{"format", c.rewards.format},
            {"subject", c.rewards.subject},
            {"text", c.rewards.text},
            {"gating", c.rewards.gating}}},
          {"eval",
           {{"bench_seed", c.eval.bench_seed},
            {"temperature", d.temperature},
            {"samples_per_case", d.samples_per_case},
            {"max_new_tokens", d.max_new_tokens},
            {"grammar_mask", d.grammar_mask},
            {"seed", d.seed}}}};
}

namespace {

bool same_kind(const nlohmann::json& a, const nlohmann::json& b) {
  if (a.is_number() && b.is_number()) {
    // Integers may not silently become fractional.
    return !(a.is_number_integer() && b.is_number_float());
  }
  return a.type() == b.type();
}

void overlay(nlohmann::json& base, const nlohmann::json& user, const std::string& where) {
  if (!user.is_object()) throw ConfigError("config section '" + where + "' must be an object");
  for (const auto& [key, value] : user.items()) {
    const std::string path = where.empty() ? key : where + "." + key;
    if (!base.contains(key)) throw ConfigError("unknown config key '" + path + "'");
    auto& slot = base[key];
    if (slot.is_object()) {
      overlay(slot, value, path);
    } else {
      if (!same_kind(slot, value)) throw ConfigError("config key '" + path + "' has the wrong type");
      if (slot.is_number_unsigned() && value.is_number_integer() && value.get<std::int64_t>() < 0) {
        throw ConfigError("config key '" + path + "' must be >= 0");
      }
      slot = value;
    }
  }
}

template <typename T>
T get(const nlohmann::json& j, const char* key) {
  return j.at(key).get<T>();
}

}  // namespace

RunConfig from_json(const nlohmann::json& doc) {
  if (!doc.is_object()) throw ConfigError("config document must be an object");
  const std::string profile = doc.contains("profile") ? doc.at("profile").get<std::string>() : "quick";
  auto merged = to_json(make_profile(profile));
  overlay(merged, doc, "");

  RunConfig c;
  try {
    c.profile = get<std::string>(merged, "profile");
    const auto& w = merged.at("world");
    c.world.n_train = get<std::size_t>(w, "n_train");
    c.world.n_eval = get<std::size_t>(w, "n_eval");
    c.world.seed = get<std::uint64_t>(w, "seed");
    c.policy = policy::policy_config_from_json(merged.at("policy"));
    const auto& s = merged.at("sft");
    c.sft.steps = get<long>(s, "steps");
    c.sft.batch_size = get<std::size_t>(s, "batch_size");
    c.sft.learning_rate = get<double>(s, "learning_rate");
    c.sft.warmup_steps = get<long>(s, "warmup_steps");
    c.sft.final_lr_fraction = get<double>(s, "final_lr_fraction");
    c.sft.seed = get<std::uint64_t>(s, "seed");
    c.sft.log_every = get<long>(s, "log_every");
    c.sft.eval_every = get<long>(s, "eval_every");
    c.sft.heldout_size = get<std::size_t>(s, "heldout_size");
    const auto& g = merged.at("grpo");
    c.grpo.steps = get<long>(g, "steps");
    c.grpo.group_size = get<std::size_t>(g, "group_size");
    c.grpo.prompts_per_step = get<std::size_t>(g, "prompts_per_step");
    c.grpo.rollout_temperature = get<double>(g, "rollout_temperature");
    c.grpo.clip_epsilon = get<double>(g, "clip_epsilon");
    c.grpo.kl_beta = get<double>(g, "kl_beta");
    c.grpo.advantage_epsilon = get<double>(g, "advantage_epsilon");
    c.grpo.learning_rate = get<double>(g, "learning_rate");
    c.grpo.max_new_tokens = get<std::size_t>(g, "max_new_tokens");
    c.grpo.rank_rewards = get<bool>(g, "rank_rewards");
    c.grpo.seed = get<std::uint64_t>(g, "seed");
    const auto& r = merged.at("rewards");
    c.rewards.format = get<double>(r, "format");
    c.rewards.subject = get<double>(r, "subject");
    c.rewards.text = get<double>(r, "text");
    c.rewards.gating = get<bool>(r, "gating");
    const auto& e = merged.at("eval");
    c.eval.bench_seed = get<std::uint64_t>(e, "bench_seed");
    c.eval.decode.temperature = get<double>(e, "temperature");
    c.eval.decode.samples_per_case = get<std::size_t>(e, "samples_per_case");
    c.eval.decode.max_new_tokens = get<std::size_t>(e, "max_new_tokens");
    c.eval.decode.grammar_mask = get<bool>(e, "grammar_mask");
    c.eval.decode.seed = get<std::uint64_t>(e, "seed");
  } catch (const nlohmann::json::exception& ex) {
    throw ConfigError(std::string("invalid config: ") + ex.what());
  }
  c.check();
  return c;
}

void apply_override(nlohmann::json& doc, std::string_view assignment) {
  const auto eq = assignment.find('=');
  if (eq == std::string_view::npos || eq == 0) {
    throw ConfigError("override '" + std::string(assignment) + "' is not key=value");
  }
  const std::string key(assignment.substr(0, eq));
  const std::string text(assignment.substr(eq + 1));
  nlohmann::json value = nlohmann::json::parse(text, nullptr, false);
  if (value.is_discarded()) value = text;
  nlohmann::json* node = &doc;
  std::size_t start = 0;
  while (true) {
    const auto dot = key.find('.', start);
    const std::string part = key.substr(start, dot == std::string::npos ? std::string::npos : dot - start);
    if (part.empty()) throw ConfigError("override key '" + key + "' is malformed");
    if (dot == std::string::npos) {
      (*node)[part] = value;
      return;
    }
    auto& child = (*node)[part];
    if (child.is_null()) child = nlohmann::json::object();
    if (!child.is_object()) throw ConfigError("override key '" + key + "' is malformed");
    node = &child;
    start = dot + 1;
  }
}

RunConfig resolve(const std::filesystem::path* file, std::span<const std::string> overrides,
                  std::string_view profile) {
  nlohmann::json doc = file ? read_json(*file) : nlohmann::json::object();
  if (!profile.empty()) doc["profile"] = std::string(profile);
  for (const auto& o : overrides) apply_override(doc, o);
  return from_json(doc);
}

nlohmann::json read_json(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open '" + path.string() + "'");
  try {
    return nlohmann::json::parse(in);
  } catch (const nlohmann::json::exception& ex) {
    throw ConfigError("'" + path.string() + "' is not valid JSON: " + ex.what());
  }
}

void write_text(const std::filesystem::path& path, std::string_view text) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write '" + path.string() + "'");
  out << text;
  if (!out) throw IoError("write failed for '" + path.string() + "'");
}

void write_json(const std::filesystem::path& path, const nlohmann::json& j, int indent) {
  write_text(path, j.dump(indent) + "\n");
}

void RunManifest::add_input(const std::string& name, const std::filesystem::path& path) {
  inputs[name] = {{"path", path.string()}, {"hash", hash_file(path)}};
}

void RunManifest::add_output(const std::string& name, const std::filesystem::path& path) {
  outputs[name] = {{"path", path.filename().string()}, {"hash", hash_file(path)}};
}

nlohmann::json RunManifest::to_json() const {
  return {{"tool_version", kToolVersion},
          {"command", command},
          {"vocab_hash", vocab().hash()},
          {"config", config},
          {"inputs", inputs},
          {"outputs", outputs},
          {"lineage", lineage}};
}

nlohmann::json verify_pinned(const std::filesystem::path& file) {
  const auto manifest_path = file.parent_path() / kManifestName;
  if (!std::filesystem::exists(manifest_path)) {
    throw IoError("'" + file.string() + "' has no run manifest next to it");
  }
  const auto manifest = read_json(manifest_path);
  const auto name = file.filename().string();
  for (const auto& [key, entry] : manifest.at("outputs").items()) {
    if (entry.at("path").get<std::string>() != name) continue;
    const auto actual = hash_file(file);
    if (actual != entry.at("hash").get<std::string>()) {
      throw HashMismatch("'" + file.string() + "' hash " + actual + " does not match manifest " +
                         entry.at("hash").get<std::string>());
    }
    return manifest;
  }
  throw IoError("'" + file.string() + "' is not listed in " + manifest_path.string());
}

}  // namespace xcot::config

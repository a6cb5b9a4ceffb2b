// SPDX-License-Identifier: Apache-2.0
#include "cpm/io.hpp"

#include <fstream>
#include <sstream>
#include <unordered_map>

#include <nlohmann/json.hpp>

#include "cpm/error.hpp"

namespace cpm {

using nlohmann::json;
using ojson = nlohmann::ordered_json;

namespace {

template <class Fn>
void for_each_line(std::string_view text, const std::string& source, Fn&& fn) {
  std::size_t line_no = 0;
  std::size_t pos = 0;
  while (pos < text.size()) {
    std::size_t end = text.find('\n', pos);
    if (end == std::string_view::npos) end = text.size();
    std::string_view line = text.substr(pos, end - pos);
    pos = end + 1;
    ++line_no;
    if (line.find_first_not_of(" \t\r") == std::string_view::npos) continue;
    json j;
    try {
      j = json::parse(line);
    } catch (const json::parse_error& e) {
      throw SchemaError(source + ":" + std::to_string(line_no) + ": invalid JSON (" + e.what() + ")");
    }
    try {
      fn(j, line_no);
    } catch (const json::exception& e) {
      throw SchemaError(source + ":" + std::to_string(line_no) + ": " + e.what());
    } catch (const SchemaError& e) {
      throw SchemaError(source + ":" + std::to_string(line_no) + ": " + e.what());
    }
  }
}

const json& field(const json& j, const char* name) {
  if (!j.is_object()) throw SchemaError("record is not an object");
  auto it = j.find(name);
  if (it == j.end()) throw SchemaError(std::string("missing field '") + name + "'");
  return *it;
}

template <class T>
T typed(const json& j, const char* name) {
  const json& v = field(j, name);
  if constexpr (std::is_same_v<T, std::string>) {
    if (!v.is_string()) throw SchemaError(std::string("field '") + name + "' must be a string");
  } else if constexpr (std::is_unsigned_v<T>) {
    if (!v.is_number_unsigned()) throw SchemaError(std::string("field '") + name + "' must be a non-negative integer");
  } else if constexpr (std::is_integral_v<T>) {
    if (!v.is_number_integer()) throw SchemaError(std::string("field '") + name + "' must be an integer");
  }
  return v.get<T>();
}

}  // namespace

std::string read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open '" + path.string() + "'");
  std::ostringstream ss;
  ss << in.rdbuf();
  if (in.bad()) throw IoError("cannot read '" + path.string() + "'");
  return ss.str();
}

void write_file_atomic(const std::filesystem::path& path, std::string_view content) {
  std::error_code ec;
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path(), ec);
  if (ec) throw IoError("cannot create directory '" + path.parent_path().string() + "': " + ec.message());
  auto tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot write '" + tmp.string() + "'");
    out.write(content.data(), static_cast<std::streamsize>(content.size()));
    if (!out) throw IoError("cannot write '" + tmp.string() + "'");
  }
  std::filesystem::rename(tmp, path, ec);
  if (ec) throw IoError("cannot rename '" + tmp.string() + "': " + ec.message());
}

std::string digest_hex(std::string_view bytes) {
  std::uint64_t h = 0xcbf29ce484222325ull;
  for (unsigned char c : bytes) {
    h ^= c;
    h *= 0x100000001b3ull;
  }
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

std::string dataset_to_jsonl(std::span<const Example> data) {
  std::string out;
  for (const auto& ex : data) {
    ojson j;
    j["id"] = ex.id;
    j["tokens"] = ex.tokens;
    std::vector<int> concepts;
    for (auto c : ex.concepts) concepts.push_back(to_int(c));
    j["concepts"] = concepts;
    j["label"] = ex.label;
    j["u_seed"] = ex.u_seed;
    j["v_seed"] = ex.v_seed;
    out += j.dump() + "\n";
  }
  return out;
}

std::vector<Example> dataset_from_jsonl(std::string_view text, const std::string& source) {
  std::vector<Example> out;
  for_each_line(text, source, [&](const json& j, std::size_t) {
    Example ex;
    ex.id = typed<std::string>(j, "id");
    const json& tokens = field(j, "tokens");
    if (!tokens.is_array()) throw SchemaError("field 'tokens' must be an array");
    for (const auto& t : tokens) {
      if (!t.is_number_integer()) throw SchemaError("token ids must be integers");
      ex.tokens.push_back(t.get<TokenId>());
    }
    const json& concepts = field(j, "concepts");
    if (!concepts.is_array()) throw SchemaError("field 'concepts' must be an array");
    for (const auto& c : concepts) {
      if (!c.is_number_integer()) throw SchemaError("concept values must be integers");
      ex.concepts.push_back(concept_value_from_int(c.get<int>()));
    }
    ex.label = typed<int>(j, "label");
    ex.u_seed = typed<std::uint64_t>(j, "u_seed");
    ex.v_seed = typed<std::uint64_t>(j, "v_seed");
    out.push_back(std::move(ex));
  });
  if (out.empty()) throw SchemaError(source + ": no records");
  return out;
}

void validate_dataset(std::span<const Example> data, const ScmConfig& cfg, const std::string& source) {
  const auto layout = VocabLayout::from(cfg);
  std::unordered_map<std::string_view, int> seen;
  for (const auto& ex : data) {
    const std::string where = source + ": example '" + ex.id + "'";
    if (ex.concepts.size() != static_cast<std::size_t>(cfg.k)) {
      throw SchemaError(where + " has " + std::to_string(ex.concepts.size()) + " concepts, expected " +
                        std::to_string(cfg.k));
    }
    if (ex.label < 0 || ex.label >= kClasses) throw SchemaError(where + " has label outside [0, 4]");
    if (ex.tokens.empty()) throw SchemaError(where + " has no tokens");
    for (TokenId t : ex.tokens) {
      if (t < 0 || t >= layout.intervention_begin()) {
        throw SchemaError(where + " has token id " + std::to_string(t) + " outside the text vocabulary");
      }
    }
    if (seen[ex.id]++) throw SchemaError(source + ": duplicate id '" + ex.id + "'");
  }
}

std::string pairs_to_jsonl(std::span<const CounterfactualPair> pairs) {
  std::string out;
  for (const auto& p : pairs) {
    ojson j;
    j["base_id"] = p.base.id;
    j["cf_id"] = p.counterfactual.id;
    j["concept"] = p.edit.concept_id;
    j["target"] = to_int(p.edit.target);
    j["kind"] = to_string(p.kind);
    out += j.dump() + "\n";
  }
  return out;
}

std::vector<CounterfactualPair> pairs_from_jsonl(std::string_view text, std::span<const Example> factual,
                                                 const ScmConfig& cfg, const std::string& source) {
  std::unordered_map<std::string, const Example*> index;
  for (const auto& ex : factual) index.emplace(ex.id, &ex);
  std::unordered_map<std::string, Example> cache;
  auto resolve = [&](const std::string& id) -> const Example& {
    auto it = cache.find(id);
    if (it == cache.end()) it = cache.emplace(id, resolve_example(id, index, cfg)).first;
    return it->second;
  };
  std::vector<CounterfactualPair> out;
  for_each_line(text, source, [&](const json& j, std::size_t) {
    CounterfactualPair p;
    const int concept_id = typed<int>(j, "concept");
    if (concept_id < 0 || concept_id >= cfg.k) throw SchemaError("concept index out of range");
    p.edit = {concept_id, concept_value_from_int(typed<int>(j, "target"))};
    p.kind = pair_kind_from_string(typed<std::string>(j, "kind"));
    try {
      p.base = resolve(typed<std::string>(j, "base_id"));
      p.counterfactual = resolve(typed<std::string>(j, "cf_id"));
    } catch (const NotFoundError& e) {
      throw SchemaError(e.what());
    }
    const auto ci = static_cast<std::size_t>(concept_id);
    if (p.kind == PairKind::Null) {
      if (p.base.id != p.counterfactual.id) throw SchemaError("null pair with distinct examples");
    } else if (p.counterfactual.concepts[ci] != p.edit.target) {
      throw SchemaError("counterfactual does not carry the edit target");
    }
    out.push_back(std::move(p));
  });
  if (out.empty()) throw SchemaError(source + ": no records");
  return out;
}

std::string checkpoint_to_json(const Encoder& model) {
  const auto& c = model.config();
  ojson j;
  j["format"] = "cpm-checkpoint";
  j["version"] = kCheckpointVersion;
  j["config"] = {{"vocab_size", c.vocab_size},   {"embed_dim", c.embed_dim},
                 {"hidden_layers", c.hidden_layers}, {"hidden_width", c.hidden_width},
                 {"classes", c.classes},         {"intervention_layer", c.intervention_layer},
                 {"site_width", c.site_width},   {"concepts", c.concepts},
                 {"probe_width", c.probe_width}};
  j["arrays"] = ojson::array();
  const auto& ps = model.params();
  for (std::size_t i = 0; i < ps.size(); ++i) {
    ojson a;
    a["name"] = ps.name(i);
    a["shape"] = ps[i].shape;
    a["data"] = ps[i].data;
    j["arrays"].push_back(std::move(a));
  }
  return j.dump() + "\n";
}

Encoder checkpoint_from_json(std::string_view text, const std::string& source) {
  json j;
  try {
    j = json::parse(text);
  } catch (const json::parse_error& e) {
    throw SchemaError(source + ": invalid JSON (" + e.what() + ")");
  }
  try {
    if (typed<std::string>(j, "format") != "cpm-checkpoint") throw SchemaError("not a checkpoint file");
    const int version = typed<int>(j, "version");
    if (version != kCheckpointVersion) throw SchemaError("unsupported checkpoint version " + std::to_string(version));
    const json& c = field(j, "config");
    EncoderConfig cfg;
    cfg.vocab_size = typed<int>(c, "vocab_size");
    cfg.embed_dim = typed<int>(c, "embed_dim");
    cfg.hidden_layers = typed<int>(c, "hidden_layers");
    cfg.hidden_width = typed<int>(c, "hidden_width");
    cfg.classes = typed<int>(c, "classes");
    cfg.intervention_layer = typed<int>(c, "intervention_layer");
    cfg.site_width = typed<int>(c, "site_width");
    cfg.concepts = typed<int>(c, "concepts");
    cfg.probe_width = typed<int>(c, "probe_width");
    try {
      cfg.validate();
    } catch (const ConfigError& e) {
      throw SchemaError(e.what());
    }
    ParamSet params;
    const json& arrays = field(j, "arrays");
    if (!arrays.is_array()) throw SchemaError("field 'arrays' must be an array");
    for (const auto& a : arrays) {
      Shape shape = field(a, "shape").get<Shape>();
      std::vector<double> data = field(a, "data").get<std::vector<double>>();
      if (shape_size(shape) != data.size()) {
        throw SchemaError("array '" + typed<std::string>(a, "name") + "' has " + std::to_string(data.size()) +
                          " values for shape " + shape_string(shape));
      }
      params.add(typed<std::string>(a, "name"), Tensor(std::move(shape), std::move(data)));
    }
    return Encoder(cfg, std::move(params));
  } catch (const json::exception& e) {
    throw SchemaError(source + ": " + e.what());
  } catch (const SchemaError& e) {
    throw SchemaError(source + ": " + e.what());
  }
}

std::string estimates_to_jsonl(std::span<const EstimateRecord> records) {
  std::string out;
  for (const auto& r : records) {
    ojson j;
    j["pair_id"] = r.pair_id;
    j["explainer"] = r.explainer;
    j["edit"] = {{"concept", r.edit.concept_id}, {"target", to_int(r.edit.target)}};
    j["delta"] = r.delta.delta;
    out += j.dump() + "\n";
  }
  return out;
}

}  // namespace cpm

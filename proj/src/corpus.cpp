// Copyright 2026 The GMC Authors
// SPDX-License-Identifier: Apache-2.0

#include "gmc/corpus.hpp"

#include <algorithm>
#include <array>
#include <fstream>
#include <sstream>
#include <unordered_map>

#include <json.hpp>

#include "gmc/common.hpp"

namespace gmc::corpus {

using nlohmann::json;

Catalog::Catalog(std::vector<std::string> domain_names) : domain_names_(std::move(domain_names)) {}

int Catalog::add(Item item) {
  if (item.item_id.empty()) throw DataError("item without id");
  if (item.title.empty()) throw DataError("item " + item.item_id + " has no title");
  if (item.domain < 0 || item.domain >= domain_count()) {
    throw DataError("item " + item.item_id + " has unknown domain index");
  }
  auto key = std::make_pair(item.domain, item.item_id);
  if (index_.count(key) != 0) throw DataError("duplicate item id " + item.item_id);
  const int idx = size();
  index_.emplace(std::move(key), idx);
  items_.push_back(std::move(item));
  return idx;
}

std::optional<int> Catalog::find(int domain, const std::string& item_id) const {
  auto it = index_.find({domain, item_id});
  if (it == index_.end()) return std::nullopt;
  return it->second;
}

std::vector<int> Catalog::domain_items(int domain) const {
  std::vector<int> out;
  for (int i = 0; i < size(); ++i) {
    if (items_[static_cast<std::size_t>(i)].domain == domain) out.push_back(i);
  }
  return out;
}

KCoreResult k_core_filter(std::span<const Interaction> interactions, int k) {
  if (k < 1) throw ConfigError("k-core needs k >= 1");
  KCoreResult result;
  std::vector<char> alive(interactions.size(), 1);
  auto user_key = [](const Interaction& x) { return std::to_string(x.domain) + '\x1f' + x.user; };
  auto item_key = [](const Interaction& x) { return std::to_string(x.domain) + '\x1f' + x.item; };
  bool changed = true;
  while (changed) {
    changed = false;
    ++result.rounds;
    std::unordered_map<std::string, int> users;
    std::unordered_map<std::string, int> items;
    for (std::size_t i = 0; i < interactions.size(); ++i) {
      if (!alive[i]) continue;
      ++users[user_key(interactions[i])];
      ++items[item_key(interactions[i])];
    }
    for (std::size_t i = 0; i < interactions.size(); ++i) {
      if (!alive[i]) continue;
      if (users[user_key(interactions[i])] < k || items[item_key(interactions[i])] < k) {
        alive[i] = 0;
        changed = true;
      }
    }
  }
  for (std::size_t i = 0; i < interactions.size(); ++i) {
    if (alive[i]) result.interactions.push_back(interactions[i]);
  }
  result.empty = result.interactions.empty();
  return result;
}

std::vector<InteractionSequence> build_sequences(std::span<const Interaction> interactions,
                                                 const Catalog& catalog, int max_len) {
  if (max_len < 1) throw ConfigError("max_len must be positive");
  struct Entry {
    std::int64_t timestamp;
    int item;
  };
  std::vector<std::pair<int, std::vector<Entry>>> groups;
  std::unordered_map<std::string, std::size_t> slot;
  for (const Interaction& x : interactions) {
    auto idx = catalog.find(x.domain, x.item);
    if (!idx) throw DataError("interaction references unknown item " + x.item);
    std::string key = std::to_string(x.domain) + '\x1f' + x.user;
    auto it = slot.find(key);
    if (it == slot.end()) {
      it = slot.emplace(key, groups.size()).first;
      groups.push_back({x.domain, {}});
    }
    groups[it->second].second.push_back({x.timestamp, *idx});
  }
  std::vector<InteractionSequence> out;
  for (auto& [domain, entries] : groups) {
    std::stable_sort(entries.begin(), entries.end(),
                     [](const Entry& a, const Entry& b) { return a.timestamp < b.timestamp; });
    const std::size_t start =
        entries.size() > static_cast<std::size_t>(max_len) ? entries.size() - static_cast<std::size_t>(max_len) : 0;
    if (entries.size() - start < 3) continue;
    InteractionSequence seq;
    seq.domain = domain;
    for (std::size_t i = start; i < entries.size(); ++i) seq.items.push_back(entries[i].item);
    out.push_back(std::move(seq));
  }
  return out;
}

SplitDataset leave_one_out_split(std::span<const InteractionSequence> sequences,
                                 TrainExpansion expansion) {
  SplitDataset split;
  for (const InteractionSequence& seq : sequences) {
    const auto& s = seq.items;
    const std::size_t m = s.size();
    if (m < 3) throw ProtocolError("leave-one-out needs sequences of length >= 3");
    auto prefix = [&](std::size_t n) { return std::vector<int>(s.begin(), s.begin() + static_cast<long>(n)); };
    split.test.push_back({prefix(m - 1), s[m - 1], seq.domain});
    split.valid.push_back({prefix(m - 2), s[m - 2], seq.domain});
    if (m < 4) continue;
    if (expansion == TrainExpansion::kFinalOnly) {
      split.train.push_back({prefix(m - 3), s[m - 3], seq.domain});
    } else {
      // Targets at 0-based positions 1 .. m-3.
      for (std::size_t j = 1; j + 2 < m; ++j) split.train.push_back({prefix(j), s[j], seq.domain});
    }
  }
  return split;
}

std::string item_text(const Item& item, const TextTemplate& tmpl) {
  std::string out;
  auto append = [&](const std::string& field) {
    if (field.empty()) return;
    if (!out.empty()) out += tmpl.separator;
    out += field;
  };
  append(item.title);
  append(item.brand);
  for (const auto& c : item.categories) append(c);
  return out;
}

namespace {

constexpr std::array<const char*, 8> kDomainWords = {
    "office", "pantry", "instruments", "arts", "scientific", "garden", "toys", "beauty"};

constexpr std::array<const char*, 16> kAttributeWords = {
    "red",   "blue",    "vintage", "compact", "deluxe", "organic", "classic", "portable",
    "green", "premium", "eco",     "mini",    "heavy",  "soft",    "bright",  "smart"};

std::string domain_word(int t) {
  if (t < static_cast<int>(kDomainWords.size())) return kDomainWords[static_cast<std::size_t>(t)];
  return "domain" + std::to_string(t);
}

std::string attribute_word(int a) {
  if (a < static_cast<int>(kAttributeWords.size())) return kAttributeWords[static_cast<std::size_t>(a)];
  return "attribute" + std::to_string(a);
}

}  // namespace

SyntheticCorpus synthesize_domains(const SyntheticSpec& spec, std::uint64_t seed) {
  if (spec.domains.size() < 2) throw ConfigError("synthetic corpus needs at least 2 domains");
  if (spec.n_attributes < 1) throw ConfigError("synthetic corpus needs at least 1 attribute");
  std::vector<std::string> names;
  for (std::size_t t = 0; t < spec.domains.size(); ++t) {
    const auto& d = spec.domains[t];
    if (d.n_items <= 0 || d.n_users <= 0 || d.n_topics <= 0) {
      throw ConfigError("synthetic domain " + d.name + " is degenerate");
    }
    if (d.min_length < 3 || d.max_length < d.min_length) {
      throw ConfigError("synthetic domain " + d.name + " has an invalid length range");
    }
    names.push_back(d.name.empty() ? domain_word(static_cast<int>(t)) : d.name);
  }
  SyntheticCorpus out{Corpus{Catalog(names), {}}, {}};
  Catalog& catalog = out.corpus.catalog;

  for (std::size_t t = 0; t < spec.domains.size(); ++t) {
    const auto& d = spec.domains[t];
    const int domain = static_cast<int>(t);
    const std::string dword = names[t];
    Rng rng(derive_seed(seed, "items:" + std::to_string(t)));
    std::vector<int> members;  // catalog indices of this domain
    for (int i = 0; i < d.n_items; ++i) {
      const int topic = i % d.n_topics;
      const int attribute = (i / d.n_topics) % spec.n_attributes;
      const std::string topic_word = dword + "topic" + std::to_string(topic);
      Item item;
      item.item_id = dword.substr(0, 3) + "-" + std::to_string(i);
      item.domain = domain;
      item.title = attribute_word(attribute) + " " + topic_word + " sku" + std::to_string(t) + "x" +
                   std::to_string(i);
      item.brand = dword + "brand" + std::to_string(uniform_index(rng, 3));
      item.categories = {dword, dword + " " + topic_word};
      members.push_back(catalog.add(std::move(item)));
      out.info.push_back({topic, attribute});
    }

    // cell (topic, attribute) -> items
    std::map<std::pair<int, int>, std::vector<int>> cells;
    for (int idx : members) {
      const auto& info = out.info[static_cast<std::size_t>(idx)];
      cells[{info.topic, info.attribute}].push_back(idx);
    }
    Rng seq_rng(derive_seed(seed, "sequences:" + std::to_string(t)));
    for (int u = 0; u < d.n_users; ++u) {
      const int span = d.max_length - d.min_length + 1;
      int length = d.min_length + static_cast<int>(uniform_index(seq_rng, static_cast<std::size_t>(span)));
      length = std::min(length, spec.max_len);
      InteractionSequence seq;
      seq.domain = domain;
      int current = members[uniform_index(seq_rng, members.size())];
      seq.items.push_back(current);
      while (static_cast<int>(seq.items.size()) < length) {
        const auto& info = out.info[static_cast<std::size_t>(current)];
        const std::pair<int, int> next_cell{info.topic, (info.attribute + 1) % spec.n_attributes};
        auto it = cells.find(next_cell);
        if (uniform01(seq_rng) < d.pattern_strength && it != cells.end()) {
          current = it->second[uniform_index(seq_rng, it->second.size())];
        } else {
          current = members[uniform_index(seq_rng, members.size())];
        }
        seq.items.push_back(current);
      }
      if (seq.items.size() >= 3) out.corpus.sequences.push_back(std::move(seq));
    }
  }
  return out;
}

std::vector<Item> read_metadata(const std::filesystem::path& path, int domain) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open metadata file " + path.string());
  std::vector<Item> items;
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (trim(line).empty()) continue;
    json j;
    try {
      j = json::parse(line);
    } catch (const json::exception& e) {
      throw DataError(path.string() + ":" + std::to_string(lineno) + ": " + e.what());
    }
    Item item;
    item.domain = domain;
    item.item_id = j.value("item_id", std::string());
    item.title = trim(j.value("title", std::string()));
    item.brand = trim(j.value("brand", std::string()));
    if (j.contains("categories") && j["categories"].is_array()) {
      for (const auto& c : j["categories"]) {
        if (c.is_string() && !c.get<std::string>().empty()) item.categories.push_back(c.get<std::string>());
      }
    }
    if (item.item_id.empty()) throw DataError(path.string() + ":" + std::to_string(lineno) + ": missing item_id");
    if (item.title.empty()) continue;
    items.push_back(std::move(item));
  }
  return items;
}

std::vector<Interaction> read_interactions(const std::filesystem::path& path, int domain) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open interaction file " + path.string());
  std::vector<Interaction> out;
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    std::string t = trim(line);
    if (t.empty()) continue;
    auto fields = split(t, ',');
    if (fields.size() != 3) {
      throw DataError(path.string() + ":" + std::to_string(lineno) + ": expected user_id,item_id,timestamp");
    }
    Interaction x;
    x.user = trim(fields[0]);
    x.item = trim(fields[1]);
    x.domain = domain;
    try {
      std::size_t used = 0;
      x.timestamp = std::stoll(trim(fields[2]), &used);
    } catch (const std::exception&) {
      if (lineno == 1) continue;  // header
      throw DataError(path.string() + ":" + std::to_string(lineno) + ": bad timestamp");
    }
    out.push_back(std::move(x));
  }
  return out;
}

void save_corpus(const Corpus& corpus, const std::filesystem::path& dir) {
  const Catalog& cat = corpus.catalog;
  json domains = cat.domain_names();
  write_file_atomic(dir / "domains.json", domains.dump() + "\n");
  std::ostringstream items;
  for (const Item& it : cat.items()) {
    json j{{"domain", it.domain},
           {"item_id", it.item_id},
           {"title", it.title},
           {"brand", it.brand},
           {"categories", it.categories}};
    items << j.dump() << '\n';
  }
  write_file_atomic(dir / "items.jsonl", items.str());
  std::ostringstream seqs;
  for (const auto& s : corpus.sequences) {
    json ids = json::array();
    for (int idx : s.items) ids.push_back(cat[idx].item_id);
    seqs << json{{"domain", s.domain}, {"items", ids}}.dump() << '\n';
  }
  write_file_atomic(dir / "sequences.jsonl", seqs.str());
}

Corpus load_corpus(const std::filesystem::path& dir) {
  json domains = json::parse(read_file(dir / "domains.json"));
  Corpus corpus{Catalog(domains.get<std::vector<std::string>>()), {}};
  {
    std::istringstream in(read_file(dir / "items.jsonl"));
    std::string line;
    while (std::getline(in, line)) {
      if (line.empty()) continue;
      json j = json::parse(line);
      Item it;
      it.domain = j.at("domain").get<int>();
      it.item_id = j.at("item_id").get<std::string>();
      it.title = j.at("title").get<std::string>();
      it.brand = j.at("brand").get<std::string>();
      it.categories = j.at("categories").get<std::vector<std::string>>();
      corpus.catalog.add(std::move(it));
    }
  }
  std::istringstream in(read_file(dir / "sequences.jsonl"));
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    json j = json::parse(line);
    InteractionSequence s;
    s.domain = j.at("domain").get<int>();
    for (const auto& id : j.at("items")) {
      auto idx = corpus.catalog.find(s.domain, id.get<std::string>());
      if (!idx) throw DataError("sequence references unknown item " + id.get<std::string>());
      s.items.push_back(*idx);
    }
    corpus.sequences.push_back(std::move(s));
  }
  return corpus;
}

void write_split_manifest(const std::filesystem::path& path, const Catalog& catalog,
                          const SplitDataset& split) {
  std::ostringstream out;
  auto emit = [&](const std::vector<Pair>& pairs, const char* label) {
    for (const Pair& p : pairs) {
      json hist = json::array();
      for (int idx : p.history) hist.push_back(catalog[idx].item_id);
      out << json{{"domain", catalog.domain_name(p.domain)},
                  {"history", hist},
                  {"target", catalog[p.target].item_id},
                  {"split", label}}
                 .dump()
          << '\n';
    }
  };
  emit(split.train, "train");
  emit(split.valid, "valid");
  emit(split.test, "test");
  write_file_atomic(path, out.str());
}

}  // namespace gmc::corpus

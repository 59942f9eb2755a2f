#include "rlda/params.hpp"

#include <cmath>
#include <fstream>

#include "rlda/errors.hpp"

namespace rlda {

using nlohmann::json;

Tensor& ParamStore::add(const std::string& name, Tensor init) {
  if (has(name)) throw ContractError("ParamStore: duplicate parameter '" + name + "'");
  Entry e;
  e.name = name;
  e.grad = Tensor(init.shape());
  e.value = std::move(init);
  items_.push_back(std::move(e));
  index_[name] = items_.size() - 1;
  return items_.back().value;
}

Tensor& ParamStore::value(const std::string& name) {
  auto it = index_.find(name);
  if (it == index_.end()) throw ContractError("ParamStore: unknown parameter '" + name + "'");
  return items_[it->second].value;
}

const Tensor& ParamStore::value(const std::string& name) const {
  auto it = index_.find(name);
  if (it == index_.end()) throw ContractError("ParamStore: unknown parameter '" + name + "'");
  return items_[it->second].value;
}

Tensor& ParamStore::grad(const std::string& name) {
  auto it = index_.find(name);
  if (it == index_.end()) throw ContractError("ParamStore: unknown parameter '" + name + "'");
  return items_[it->second].grad;
}

int64_t ParamStore::total_params() const {
  int64_t n = 0;
  for (const auto& e : items_) n += e.value.numel();
  return n;
}

void ParamStore::zero_grad() {
  for (auto& e : items_) e.grad.fill(0.0);
}

double ParamStore::grad_norm() const {
  double s = 0.0;
  for (const auto& e : items_)
    for (double g : e.grad.vec()) s += g * g;
  return std::sqrt(s);
}

void ParamStore::scale_grads(double s) {
  for (auto& e : items_)
    for (double& g : e.grad.vec()) g *= s;
}

bool ParamStore::grads_finite() const {
  for (const auto& e : items_)
    if (!e.grad.all_finite()) return false;
  return true;
}

bool ParamStore::values_finite() const {
  for (const auto& e : items_)
    if (!e.value.all_finite()) return false;
  return true;
}

void ParamStore::copy_values_from(const ParamStore& other) {
  if (other.items_.size() != items_.size())
    throw ContractError("ParamStore::copy_values_from: entry count mismatch");
  for (size_t i = 0; i < items_.size(); ++i) {
    if (items_[i].name != other.items_[i].name ||
        !items_[i].value.same_shape(other.items_[i].value))
      throw ContractError("ParamStore::copy_values_from: layout mismatch at '" +
                          items_[i].name + "'");
    items_[i].value = other.items_[i].value;
  }
}

json ParamStore::values_to_json() const {
  json manifest = json::array();
  json data = json::object();
  for (const auto& e : items_) {
    manifest.push_back({{"name", e.name}, {"shape", e.value.shape()}});
    data[e.name] = e.value.vec();
  }
  return json{{"manifest", manifest}, {"data", data}};
}

void ParamStore::values_from_json(const json& j) {
  if (!j.contains("manifest") || !j.contains("data"))
    throw ConfigError("checkpoint: missing 'manifest' or 'data'");
  const json& manifest = j.at("manifest");
  const bool empty_store = items_.empty();
  if (!empty_store && manifest.size() != items_.size())
    throw ConfigError("checkpoint: parameter count mismatch (file has " +
                      std::to_string(manifest.size()) + ", store has " +
                      std::to_string(items_.size()) + ")");
  for (size_t i = 0; i < manifest.size(); ++i) {
    const std::string name = manifest[i].at("name").get<std::string>();
    const auto shape = manifest[i].at("shape").get<std::vector<int64_t>>();
    auto values = j.at("data").at(name).get<std::vector<double>>();
    Tensor v = Tensor::from_vector(values);
    v.reshape(shape);
    if (empty_store) {
      add(name, std::move(v));
    } else {
      if (items_[i].name != name || !items_[i].value.same_shape(v))
        throw ConfigError("checkpoint: parameter '" + name +
                          "' does not match the expected layout");
      items_[i].value = std::move(v);
    }
  }
}

NodeId TapeBinding::operator[](const std::string& name) const {
  auto it = by_name.find(name);
  if (it == by_name.end())
    throw ContractError("TapeBinding: parameter '" + name + "' not bound");
  return it->second;
}

TapeBinding bind_params(Tape& t, const ParamStore& store) {
  TapeBinding b;
  b.slots.reserve(store.size());
  for (size_t i = 0; i < store.entries().size(); ++i) {
    const auto& e = store.entries()[i];
    NodeId id = t.leaf(e.value, /*requires_grad=*/true);
    b.slots.emplace_back(i, id);
    b.by_name.emplace(e.name, id);
  }
  return b;
}

void collect_grads(Tape& t, ParamStore& store, const TapeBinding& binding) {
  for (const auto& [idx, id] : binding.slots) {
    if (!t.grad_live(id)) continue;
    const Tensor& g = t.grad(id);
    Tensor& acc = store.entries()[idx].grad;
    for (int64_t i = 0; i < g.numel(); ++i) acc.at(i) += g.at(i);
  }
}

Tensor glorot_uniform(std::vector<int64_t> shape, int64_t fan_in, int64_t fan_out,
                      Rng& rng) {
  Tensor t(std::move(shape));
  const double a = std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
  for (int64_t i = 0; i < t.numel(); ++i) t.at(i) = a * (2.0 * rng.uniform() - 1.0);
  return t;
}

void save_checkpoint(const std::string& path, const ParamStore& store,
                     const json& meta) {
  json j = store.values_to_json();
  j["meta"] = meta;
  std::ofstream out(path);
  if (!out) throw Error("cannot open checkpoint file for writing: " + path);
  out << j.dump(2) << '\n';
  if (!out) throw Error("failed writing checkpoint file: " + path);
}

json load_checkpoint(const std::string& path, ParamStore& store) {
  std::ifstream in(path);
  if (!in) throw Error("cannot open checkpoint file: " + path);
  json j = json::parse(in);
  store.values_from_json(j);
  return j.contains("meta") ? j.at("meta") : json::object();
}

}  // namespace rlda

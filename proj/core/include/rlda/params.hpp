#pragma once

#include <string>
#include <unordered_map>
#include <vector>

#include "json.hpp"

#include "rlda/tape.hpp"
#include "rlda/tensor.hpp"

namespace rlda {

// Named parameter tensors with gradient accumulators. Iteration order is the
// registration order, which is fixed by the architecture construction code,
// so optimizer state and serialization are deterministic.
class ParamStore {
 public:
  struct Entry {
    std::string name;
    Tensor value;
    Tensor grad;
  };

  Tensor& add(const std::string& name, Tensor init);
  bool has(const std::string& name) const { return index_.count(name) > 0; }
  Tensor& value(const std::string& name);
  const Tensor& value(const std::string& name) const;
  Tensor& grad(const std::string& name);

  std::vector<Entry>& entries() { return items_; }
  const std::vector<Entry>& entries() const { return items_; }
  size_t size() const { return items_.size(); }
  int64_t total_params() const;

  void zero_grad();
  // Global l2 norm over all gradient accumulators.
  double grad_norm() const;
  void scale_grads(double s);
  bool grads_finite() const;
  bool values_finite() const;

  // Copies values (not grads) from another store with identical layout.
  void copy_values_from(const ParamStore& other);

  nlohmann::json values_to_json() const;           // {"manifest":[...],"data":{...}}
  void values_from_json(const nlohmann::json& j);  // fills an empty or matching store

 private:
  std::vector<Entry> items_;
  std::unordered_map<std::string, size_t> index_;
};

// Leaf node per parameter, keyed by name. Used to wire a ParamStore into a
// tape-recorded forward pass and to pull gradients back out.
struct TapeBinding {
  std::vector<std::pair<size_t, NodeId>> slots;  // (entry index, leaf id)
  std::unordered_map<std::string, NodeId> by_name;

  NodeId operator[](const std::string& name) const;
};

TapeBinding bind_params(Tape& t, const ParamStore& store);
// Accumulates tape leaf gradients into the store's grad buffers.
void collect_grads(Tape& t, ParamStore& store, const TapeBinding& binding);

// Glorot-uniform weight init: U(-a, a), a = sqrt(6 / (fan_in + fan_out)).
Tensor glorot_uniform(std::vector<int64_t> shape, int64_t fan_in, int64_t fan_out,
                      Rng& rng);

// Checkpoint file = values_to_json() plus a "meta" object supplied by the
// caller. Doubles survive the round trip exactly (shortest-round-trip text).
void save_checkpoint(const std::string& path, const ParamStore& store,
                     const nlohmann::json& meta);
nlohmann::json load_checkpoint(const std::string& path, ParamStore& store);

}  // namespace rlda

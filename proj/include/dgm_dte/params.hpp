#pragma once

#include <deque>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "dgm_dte/tensor.hpp"

namespace dgm {

/// A named model weight. `grad` stays empty until zero_grad() or a backward
/// pass populates it.
struct Parameter {
  std::string name;
  Tensor value;
  Tensor grad;
  bool trainable = true;
};

/// Owns every weight of a model. Addresses are stable for the store's lifetime.
class ParamStore {
 public:
  ParamStore() = default;
  ParamStore(const ParamStore&) = delete;
  ParamStore& operator=(const ParamStore&) = delete;
  ParamStore(ParamStore&&) = default;
  ParamStore& operator=(ParamStore&&) = default;

  Parameter& add(std::string name, Tensor value, bool trainable = true);
  Parameter& at(const std::string& name);
  const Parameter& at(const std::string& name) const;
  Parameter* find(const std::string& name);
  const Parameter* find(const std::string& name) const;

  std::size_t size() const noexcept { return params_.size(); }
  std::size_t num_values() const;
  auto begin() { return params_.begin(); }
  auto end() { return params_.end(); }
  auto begin() const { return params_.begin(); }
  auto end() const { return params_.end(); }

  void zero_grad();
  void clear_grad();

  /// Copies of all values, in registration order.
  std::vector<Tensor> snapshot() const;
  void restore(const std::vector<Tensor>& values);

 private:
  std::deque<Parameter> params_;
  std::map<std::string, std::size_t> index_;
};

/// Checkpoint document: a JSON object mapping parameter name to
/// {"shape": [...], "data": [...]}, values printed with 17 significant
/// digits. An optional raw JSON payload is stored under "__config__".
std::string checkpoint_json(const ParamStore& store, const std::string& config_json = {});
void save_checkpoint(const ParamStore& store, const std::filesystem::path& path,
                     const std::string& config_json = {});

struct CheckpointData {
  std::map<std::string, Tensor> params;
  std::optional<std::string> config_json;
};
CheckpointData read_checkpoint(const std::filesystem::path& path);
CheckpointData parse_checkpoint(const std::string& text);

/// Copies checkpoint values into `store`. Every store parameter must be
/// present with an identical shape; mismatches throw naming both shapes.
void load_params(ParamStore& store, const CheckpointData& ckpt);

}  // namespace dgm

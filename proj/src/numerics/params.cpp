#include "dgm_dte/params.hpp"

#include <cstdio>
#include <fstream>
#include <sstream>
#include <stdexcept>

#include <json.hpp>

namespace dgm {

Parameter& ParamStore::add(std::string name, Tensor value, bool trainable) {
  if (index_.count(name)) throw std::invalid_argument("duplicate parameter '" + name + "'");
  index_[name] = params_.size();
  params_.push_back(Parameter{std::move(name), std::move(value), Tensor{}, trainable});
  return params_.back();
}

Parameter& ParamStore::at(const std::string& name) {
  if (auto* p = find(name)) return *p;
  throw std::out_of_range("unknown parameter '" + name + "'");
}

const Parameter& ParamStore::at(const std::string& name) const {
  if (const auto* p = find(name)) return *p;
  throw std::out_of_range("unknown parameter '" + name + "'");
}

Parameter* ParamStore::find(const std::string& name) {
  auto it = index_.find(name);
  return it == index_.end() ? nullptr : &params_[it->second];
}

const Parameter* ParamStore::find(const std::string& name) const {
  auto it = index_.find(name);
  return it == index_.end() ? nullptr : &params_[it->second];
}

std::size_t ParamStore::num_values() const {
  std::size_t n = 0;
  for (const auto& p : params_) n += p.value.size();
  return n;
}

void ParamStore::zero_grad() {
  for (auto& p : params_) p.grad = Tensor(p.value.shape(), 0.0);
}

void ParamStore::clear_grad() {
  for (auto& p : params_) p.grad = Tensor{};
}

std::vector<Tensor> ParamStore::snapshot() const {
  std::vector<Tensor> out;
  out.reserve(params_.size());
  for (const auto& p : params_) out.push_back(p.value);
  return out;
}

void ParamStore::restore(const std::vector<Tensor>& values) {
  if (values.size() != params_.size()) throw std::invalid_argument("restore: parameter count mismatch");
  for (std::size_t i = 0; i < values.size(); ++i) params_[i].value = values[i];
}

namespace {

void append_double(std::string& out, double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  out += buf;
}

std::string quoted(const std::string& s) { return nlohmann::json(s).dump(); }

}  // namespace

std::string checkpoint_json(const ParamStore& store, const std::string& config_json) {
  std::string out = "{\n";
  bool first = true;
  if (!config_json.empty()) {
    out += "  \"__config__\": ";
    out += config_json;
    first = false;
  }
  for (const auto& p : store) {
    if (!first) out += ",\n";
    first = false;
    out += "  " + quoted(p.name) + ": {\"shape\": [";
    for (std::size_t i = 0; i < p.value.shape().size(); ++i) {
      if (i) out += ", ";
      out += std::to_string(p.value.shape()[i]);
    }
    out += "], \"data\": [";
    for (std::size_t i = 0; i < p.value.size(); ++i) {
      if (i) out += ", ";
      append_double(out, p.value[i]);
    }
    out += "]}";
  }
  out += "\n}\n";
  return out;
}

void save_checkpoint(const ParamStore& store, const std::filesystem::path& path,
                     const std::string& config_json) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw std::runtime_error("cannot open '" + path.string() + "' for writing");
  os << checkpoint_json(store, config_json);
  if (!os) throw std::runtime_error("failed writing '" + path.string() + "'");
}

CheckpointData parse_checkpoint(const std::string& text) {
  const auto doc = nlohmann::json::parse(text);
  if (!doc.is_object()) throw std::runtime_error("checkpoint: top level must be an object");
  CheckpointData out;
  for (const auto& [name, entry] : doc.items()) {
    if (name == "__config__") {
      out.config_json = entry.dump();
      continue;
    }
    if (name.rfind("__", 0) == 0) continue;
    Shape shape = entry.at("shape").get<Shape>();
    std::vector<double> data = entry.at("data").get<std::vector<double>>();
    out.params.emplace(name, Tensor(std::move(shape), std::move(data)));
  }
  return out;
}

CheckpointData read_checkpoint(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("cannot open checkpoint '" + path.string() + "'");
  std::stringstream ss;
  ss << is.rdbuf();
  return parse_checkpoint(ss.str());
}

void load_params(ParamStore& store, const CheckpointData& ckpt) {
  for (auto& p : store) {
    auto it = ckpt.params.find(p.name);
    if (it == ckpt.params.end()) throw std::runtime_error("checkpoint lacks parameter '" + p.name + "'");
    if (it->second.shape() != p.value.shape()) {
      throw std::runtime_error("parameter '" + p.name + "': checkpoint shape " +
                               shape_str(it->second.shape()) + " vs model shape " +
                               shape_str(p.value.shape()));
    }
  }
  for (auto& p : store) p.value = ckpt.params.at(p.name);
}

}  // namespace dgm

#pragma once

#include <filesystem>
#include <map>
#include <stdexcept>
#include <string>
#include <vector>

#include "aegis/autograd/parameter_store.hpp"

// Single-file container used for model checkpoints, anchors and dataset dumps.
//
// Layout: a text manifest followed by raw 64-bit little-endian doubles.
//
//   AEGIS-CONTAINER 1
//   meta <key> <value>                      (any number; value runs to end of line)
//   tensor <name> <d0,d1,...> <offset> <count>
//   end
//   <payload: count doubles per tensor, starting at element `offset`>
//
// Offsets count elements from the first payload byte. Names and keys contain
// no whitespace.
namespace aegis::models {

struct TensorRecord {
  std::string name;
  ag::Shape shape;
  std::vector<double> data;
};

struct Container {
  std::map<std::string, std::string> meta;
  std::vector<TensorRecord> tensors;

  const TensorRecord& find(const std::string& name) const;
  const std::string& meta_at(const std::string& key) const;
};

class FormatError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

void save_container(const std::filesystem::path& path, const Container& container);
Container load_container(const std::filesystem::path& path);

// Serializes parameters (in store order) into a container.
Container container_from_store(const ag::ParameterStore& store);
// Copies values from a container into matching parameters. Every parameter
// in `store` must be present with an identical shape.
void load_store_values(ag::ParameterStore& store, const Container& container);

}  // namespace aegis::models

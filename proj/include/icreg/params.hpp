#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include "icreg/autodiff.hpp"

namespace icreg {

/// One trainable array with its Adam moments.
struct Parameter {
    ad::Shape shape;
    std::vector<double> value;
    std::vector<double> first_moment;
    std::vector<double> second_moment;
    std::uint64_t step = 0;
};

/// Parameters bound to a tape (or as constants when no tape is given).
class ParamBinding {
  public:
    const ad::Tensor& operator[](const std::string& name) const;
    bool contains(const std::string& name) const { return tensors_.count(name) != 0; }
    const std::map<std::string, ad::Tensor>& tensors() const { return tensors_; }

  private:
    friend class ParamStore;
    std::map<std::string, ad::Tensor> tensors_;
};

/// Named parameters in insertion order.
class ParamStore {
  public:
    /// Throws std::invalid_argument on duplicate names or size mismatch.
    void add(const std::string& name, ad::Shape shape, std::vector<double> values);

    bool contains(const std::string& name) const { return index_.count(name) != 0; }
    Parameter& at(const std::string& name);
    const Parameter& at(const std::string& name) const;
    const std::vector<std::string>& names() const { return order_; }
    std::size_t scalar_count() const;

    ParamBinding bind(ad::Tape* tape) const;

    bool operator==(const ParamStore& other) const;

  private:
    std::vector<std::string> order_;
    std::map<std::string, Parameter> index_;
};

// Checkpoint container: "ICCKPT01", u64 little-endian manifest length, JSON
// manifest (array of {name, shape, byte_offset}), then little-endian doubles.
// Adam moments are stored as "<name>@adam_m" / "<name>@adam_v" entries and the
// step counter as an extra "step" field on the value entry.
void save_checkpoint(const ParamStore& store, const std::filesystem::path& path);
ParamStore load_checkpoint(const std::filesystem::path& path);

}  // namespace icreg

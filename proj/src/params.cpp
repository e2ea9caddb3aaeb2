#include "icreg/params.hpp"

#include <cstring>
#include <stdexcept>

#include <nlohmann/json.hpp>

#include "icreg/io.hpp"

namespace icreg {

namespace {
constexpr char kCheckpointMagic[8] = {'I', 'C', 'C', 'K', 'P', 'T', '0', '1'};
}

const ad::Tensor& ParamBinding::operator[](const std::string& name) const {
    auto it = tensors_.find(name);
    if (it == tensors_.end()) throw std::out_of_range("no parameter named '" + name + "'");
    return it->second;
}

void ParamStore::add(const std::string& name, ad::Shape shape, std::vector<double> values) {
    if (index_.count(name)) throw std::invalid_argument("duplicate parameter name '" + name + "'");
    if (ad::shape_size(shape) != values.size())
        throw std::invalid_argument("parameter '" + name + "': shape " + ad::shape_to_string(shape) +
                                    " does not hold " + std::to_string(values.size()) + " values");
    Parameter p;
    p.first_moment.assign(values.size(), 0.0);
    p.second_moment.assign(values.size(), 0.0);
    p.shape = std::move(shape);
    p.value = std::move(values);
    index_.emplace(name, std::move(p));
    order_.push_back(name);
}

Parameter& ParamStore::at(const std::string& name) {
    auto it = index_.find(name);
    if (it == index_.end()) throw std::out_of_range("no parameter named '" + name + "'");
    return it->second;
}

const Parameter& ParamStore::at(const std::string& name) const {
    auto it = index_.find(name);
    if (it == index_.end()) throw std::out_of_range("no parameter named '" + name + "'");
    return it->second;
}

std::size_t ParamStore::scalar_count() const {
    std::size_t n = 0;
    for (const auto& [_, p] : index_) n += p.value.size();
    return n;
}

ParamBinding ParamStore::bind(ad::Tape* tape) const {
    ParamBinding b;
    for (const auto& name : order_) {
        const auto& p = index_.at(name);
        b.tensors_.emplace(name, tape ? tape->variable(p.shape, p.value) : ad::Tensor::constant(p.shape, p.value));
    }
    return b;
}

bool ParamStore::operator==(const ParamStore& other) const {
    if (order_ != other.order_) return false;
    for (const auto& name : order_) {
        const auto& a = index_.at(name);
        const auto& b = other.index_.at(name);
        if (a.shape != b.shape || a.step != b.step) return false;
        if (std::memcmp(a.value.data(), b.value.data(), 8 * a.value.size()) != 0) return false;
        if (std::memcmp(a.first_moment.data(), b.first_moment.data(), 8 * a.value.size()) != 0) return false;
        if (std::memcmp(a.second_moment.data(), b.second_moment.data(), 8 * a.value.size()) != 0) return false;
    }
    return true;
}

void save_checkpoint(const ParamStore& store, const std::filesystem::path& path) {
    nlohmann::json manifest = nlohmann::json::array();
    std::string payload;
    auto append = [&](const std::string& name, const ad::Shape& shape, const std::vector<double>& v) {
        nlohmann::json e{{"name", name}, {"shape", shape}, {"byte_offset", payload.size()}};
        for (double x : v) io::put_f64(payload, x);
        return e;
    };
    for (const auto& name : store.names()) {
        const auto& p = store.at(name);
        auto e = append(name, p.shape, p.value);
        e["step"] = p.step;
        manifest.push_back(std::move(e));
        manifest.push_back(append(name + "@adam_m", p.shape, p.first_moment));
        manifest.push_back(append(name + "@adam_v", p.shape, p.second_moment));
    }
    const std::string text = manifest.dump();
    std::string bytes(kCheckpointMagic, 8);
    io::put_u64(bytes, text.size());
    bytes += text;
    bytes += payload;
    io::write_file(path, bytes);
}

ParamStore load_checkpoint(const std::filesystem::path& path) {
    const std::string bytes = io::read_file(path);
    const auto* p = reinterpret_cast<const unsigned char*>(bytes.data());
    if (bytes.size() < 16 || std::memcmp(bytes.data(), kCheckpointMagic, 8) != 0)
        throw io::IoError(path.string() + ": not an ICCKPT01 checkpoint (byte offset 0)");
    const std::uint64_t len = io::get_u64_le(p + 8);
    if (16 + len > bytes.size()) throw io::IoError(path.string() + ": truncated manifest at byte offset 16");
    nlohmann::json manifest;
    try {
        manifest = nlohmann::json::parse(bytes.substr(16, len));
    } catch (const nlohmann::json::exception& e) {
        throw io::IoError(path.string() + ": malformed manifest: " + e.what());
    }
    const std::size_t data_off = 16 + len;
    auto read_entry = [&](const nlohmann::json& e) {
        const auto shape = e.at("shape").get<ad::Shape>();
        const std::size_t off = e.at("byte_offset").get<std::size_t>();
        const std::size_t n = ad::shape_size(shape);
        if (data_off + off + 8 * n > bytes.size())
            throw io::IoError(path.string() + ": truncated tensor data at byte offset " + std::to_string(data_off + off));
        std::vector<double> v(n);
        for (std::size_t i = 0; i < n; ++i) v[i] = io::get_f64_le(p + data_off + off + 8 * i);
        return v;
    };
    ParamStore store;
    std::map<std::string, const nlohmann::json*> extras;
    for (const auto& e : manifest) {
        const auto name = e.at("name").get<std::string>();
        if (name.find('@') != std::string::npos) {
            extras[name] = &e;
            continue;
        }
        store.add(name, e.at("shape").get<ad::Shape>(), read_entry(e));
        store.at(name).step = e.value("step", std::uint64_t{0});
    }
    for (const auto& name : store.names()) {
        auto& prm = store.at(name);
        if (auto it = extras.find(name + "@adam_m"); it != extras.end()) prm.first_moment = read_entry(*it->second);
        if (auto it = extras.find(name + "@adam_v"); it != extras.end()) prm.second_moment = read_entry(*it->second);
    }
    return store;
}

}  // namespace icreg

#pragma once

#include <cmath>
#include <cstddef>
#include <cstring>
#include <string>
#include <unordered_map>
#include <vector>

#include "mim/error.h"

namespace mim {

// Dense row-major f32 array with shape. The universal numeric carrier:
// images, token sequences, features, parameters, optimizer moments.
class Tensor {
public:
    Tensor() = default;

    explicit Tensor(std::vector<std::size_t> shape) : shape_(std::move(shape)) {
        data_.assign(checked_size(shape_), 0.0f);
    }

    static Tensor from(std::vector<std::size_t> shape, std::vector<float> data) {
        Tensor t;
        if (checked_size(shape) != data.size())
            throw ContractError("tensor data length " + std::to_string(data.size()) +
                                " does not match shape product " +
                                std::to_string(checked_size(shape)));
        t.shape_ = std::move(shape);
        t.data_ = std::move(data);
        return t;
    }

    const std::vector<std::size_t>& shape() const { return shape_; }
    std::size_t rank() const { return shape_.size(); }
    std::size_t dim(std::size_t i) const { return shape_.at(i); }
    std::size_t size() const { return data_.size(); }
    bool empty() const { return data_.empty(); }

    float* data() { return data_.data(); }
    const float* data() const { return data_.data(); }

    float& operator[](std::size_t i) { return data_[i]; }
    float operator[](std::size_t i) const { return data_[i]; }

    // 2-D accessors for the [rows x cols] hot paths.
    std::size_t rows() const { return shape_.empty() ? 0 : shape_[0]; }
    std::size_t cols() const { return rank() < 2 ? (rank() == 1 ? 1 : 0) : shape_[1]; }
    float* row(std::size_t r) { return data_.data() + r * cols(); }
    const float* row(std::size_t r) const { return data_.data() + r * cols(); }
    float& at(std::size_t r, std::size_t c) { return data_[r * cols() + c]; }
    float at(std::size_t r, std::size_t c) const { return data_[r * cols() + c]; }

    void fill(float v) { std::fill(data_.begin(), data_.end(), v); }

    bool same_shape(const Tensor& o) const { return shape_ == o.shape_; }

    bool bit_equal(const Tensor& o) const {
        return same_shape(o) &&
               (data_.empty() ||
                std::memcmp(data_.data(), o.data_.data(), data_.size() * sizeof(float)) == 0);
    }

    bool all_finite() const {
        for (float v : data_)
            if (!std::isfinite(v)) return false;
        return true;
    }

    std::string shape_str() const {
        std::string s = "[";
        for (std::size_t i = 0; i < shape_.size(); ++i)
            s += (i ? "x" : "") + std::to_string(shape_[i]);
        return s + "]";
    }

private:
    static std::size_t checked_size(const std::vector<std::size_t>& shape) {
        std::size_t n = 1;
        for (std::size_t d : shape) {
            if (d == 0) throw ContractError("tensor dimensions must be positive");
            n *= d;
        }
        return n;
    }

    std::vector<std::size_t> shape_;
    std::vector<float> data_;
};

// A token sequence is a [(M+1) x width] tensor; row 0 is the CLS slot.
using TokenSequence = Tensor;

// Ordered map from dotted parameter name to tensor, each entry flagged
// trainable or frozen. Iteration order is insertion order.
class ParamStore {
public:
    struct Entry {
        std::string name;
        Tensor value;
        bool trainable = true;
    };

    Tensor& add(const std::string& name, Tensor value, bool trainable = true) {
        if (index_.count(name)) throw ContractError("duplicate parameter name: " + name);
        index_.emplace(name, entries_.size());
        entries_.push_back(Entry{name, std::move(value), trainable});
        return entries_.back().value;
    }

    bool has(const std::string& name) const { return index_.count(name) != 0; }

    Tensor& get(const std::string& name) {
        return entries_[index_of(name)].value;
    }
    const Tensor& get(const std::string& name) const {
        return entries_[index_of(name)].value;
    }

    bool trainable(const std::string& name) const { return entries_[index_of(name)].trainable; }
    void set_trainable(const std::string& name, bool t) { entries_[index_of(name)].trainable = t; }
    void freeze_all() {
        for (auto& e : entries_) e.trainable = false;
    }

    void remove(const std::string& name) {
        const std::size_t i = index_of(name);
        entries_.erase(entries_.begin() + static_cast<std::ptrdiff_t>(i));
        index_.clear();
        for (std::size_t k = 0; k < entries_.size(); ++k) index_.emplace(entries_[k].name, k);
    }

    const std::vector<Entry>& entries() const { return entries_; }
    std::vector<Entry>& entries_mut() { return entries_; }
    std::size_t count() const { return entries_.size(); }

    std::size_t param_count() const {
        std::size_t n = 0;
        for (const auto& e : entries_) n += e.value.size();
        return n;
    }

    bool bit_equal(const ParamStore& o) const {
        if (entries_.size() != o.entries_.size()) return false;
        for (std::size_t i = 0; i < entries_.size(); ++i) {
            if (entries_[i].name != o.entries_[i].name) return false;
            if (!entries_[i].value.bit_equal(o.entries_[i].value)) return false;
        }
        return true;
    }

private:
    std::size_t index_of(const std::string& name) const {
        auto it = index_.find(name);
        if (it == index_.end()) throw ContractError("no parameter named " + name);
        return it->second;
    }

    std::vector<Entry> entries_;
    std::unordered_map<std::string, std::size_t> index_;
};

// Gradient accumulator keyed by parameter name. Tensors are created zeroed
// on first touch and must keep a consistent shape afterwards.
class Gradients {
public:
    Tensor& accum(const std::string& name, const std::vector<std::size_t>& shape) {
        auto it = map_.find(name);
        if (it == map_.end()) {
            it = map_.emplace(name, Tensor(shape)).first;
            order_.push_back(name);
        } else if (it->second.shape() != shape) {
            throw ContractError("gradient shape mismatch for " + name);
        }
        return it->second;
    }

    const Tensor* find(const std::string& name) const {
        auto it = map_.find(name);
        return it == map_.end() ? nullptr : &it->second;
    }

    Tensor& get(const std::string& name) {
        auto it = map_.find(name);
        if (it == map_.end()) throw ContractError("no gradient named " + name);
        return it->second;
    }

    void insert(const std::string& name, Tensor t) {
        if (map_.count(name)) throw ContractError("duplicate gradient name: " + name);
        map_.emplace(name, std::move(t));
        order_.push_back(name);
    }

    const std::vector<std::string>& names() const { return order_; }
    std::size_t count() const { return map_.size(); }
    void clear() {
        map_.clear();
        order_.clear();
    }

private:
    std::unordered_map<std::string, Tensor> map_;
    std::vector<std::string> order_;
};

}  // namespace mim

#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>
#include <utility>
#include <variant>

namespace cpas {

// Virtual or wall time in milliseconds.
using Millis = std::int64_t;

using TeId = std::uint32_t;

// Minimal value-or-error holder (std::expected is C++23).
template <typename T, typename E>
class Expected {
 public:
  Expected(T value) : data_(std::in_place_index<0>, std::move(value)) {}
  Expected(E error) : data_(std::in_place_index<1>, std::move(error)) {}

  bool has_value() const noexcept { return data_.index() == 0; }
  explicit operator bool() const noexcept { return has_value(); }

  T& value() & {
    if (!has_value()) throw std::logic_error("Expected: no value");
    return std::get<0>(data_);
  }
  const T& value() const& {
    if (!has_value()) throw std::logic_error("Expected: no value");
    return std::get<0>(data_);
  }
  const E& error() const& {
    if (has_value()) throw std::logic_error("Expected: no error");
    return std::get<1>(data_);
  }

  const T& operator*() const& { return value(); }
  const T* operator->() const { return &value(); }

 private:
  std::variant<T, E> data_;
};

}  // namespace cpas

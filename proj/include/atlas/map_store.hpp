#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <mutex>

#include "atlas/map.hpp"

namespace atlas {

struct MapSnapshot {
  std::uint64_t version = 0;
  MultiSessionMap map;
};

/// Single writer, many readers. Readers take an immutable snapshot and keep
/// using it for as long as they hold the pointer; writers are serialized and
/// publish a whole new snapshot at once.
class MapStore {
 public:
  explicit MapStore(MultiSessionMap initial = {})
      : current_(std::make_shared<const MapSnapshot>(MapSnapshot{0, std::move(initial)})) {}

  std::shared_ptr<const MapSnapshot> snapshot() const {
    std::lock_guard lock(publish_mutex_);
    return current_;
  }

  /// Runs `update` on a private copy of the current map and publishes the
  /// result. If `update` throws, nothing is published. A void `update`
  /// yields the published version.
  template <typename Fn>
  auto update(Fn&& update) {
    std::lock_guard writer(writer_mutex_);
    auto base = snapshot();
    MultiSessionMap working = base->map;
    if constexpr (std::is_void_v<std::invoke_result_t<Fn, MultiSessionMap&>>) {
      std::invoke(std::forward<Fn>(update), working);
      publish(base->version + 1, std::move(working));
      return base->version + 1;
    } else {
      auto result = std::invoke(std::forward<Fn>(update), working);
      publish(base->version + 1, std::move(working));
      return result;
    }
  }

 private:
  void publish(std::uint64_t version, MultiSessionMap m) {
    auto next = std::make_shared<const MapSnapshot>(MapSnapshot{version, std::move(m)});
    std::lock_guard lock(publish_mutex_);
    current_ = std::move(next);
  }

  mutable std::mutex publish_mutex_;
  std::mutex writer_mutex_;
  std::shared_ptr<const MapSnapshot> current_;
};

}  // namespace atlas

#pragma once

// Independent reference implementations shared by the unit tests and the
// acceptance binary. None of them call into the code they check.

#include <array>
#include <cmath>
#include <deque>
#include <memory>
#include <span>
#include <vector>

#include "pdit/env.hpp"
#include "pdit/tensor.hpp"

namespace pdit::oracles {

// std::vector<bool> has no contiguous storage, so done flags live here.
struct Flags {
  explicit Flags(std::size_t n) : data(new bool[n]()), size(n) {}
  Flags(std::initializer_list<bool> xs) : Flags(xs.size()) { std::copy(xs.begin(), xs.end(), data.get()); }
  std::span<const bool> span() const { return {data.get(), size}; }
  std::unique_ptr<bool[]> data;
  std::size_t size;
};

// A_t = sum_k (gamma lambda)^k delta_{t+k}, truncated at the first done.
inline std::vector<double> brute_force_gae(const std::vector<float>& r, const std::vector<float>& v,
                                           std::span<const bool> done, float bootstrap, double gamma, double lambda) {
  const std::size_t n = r.size();
  std::vector<double> delta(n);
  for (std::size_t t = 0; t < n; ++t) {
    const double next_v = t + 1 < n ? v[t + 1] : bootstrap;
    delta[t] = r[t] + (done[t] ? 0.0 : gamma * next_v) - v[t];
  }
  std::vector<double> adv(n);
  for (std::size_t t = 0; t < n; ++t) {
    double acc = 0.0, w = 1.0;
    for (std::size_t k = t; k < n; ++k) {
      acc += w * delta[k];
      if (done[k]) break;
      w *= gamma * lambda;
    }
    adv[t] = acc;
  }
  return adv;
}

// Symmetric InfoNCE evaluated with explicit loops in double precision.
inline double brute_force_infonce(const Tensor& v, const Tensor& t, double tau) {
  const std::size_t n = v.dim(0), d = v.dim(1);
  auto norm = [d](const Tensor& x, std::size_t i) {
    double s = 0.0;
    for (std::size_t k = 0; k < d; ++k) s += double(x[i * d + k]) * x[i * d + k];
    return std::sqrt(s);
  };
  std::vector<double> sim(n * n);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < n; ++j) {
      double dot = 0.0;
      for (std::size_t k = 0; k < d; ++k) dot += double(v[i * d + k]) * t[j * d + k];
      sim[i * n + j] = dot / (norm(v, i) * norm(t, j)) / tau;
    }
  double i2t = 0.0, t2i = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    double row = 0.0, col = 0.0;
    for (std::size_t j = 0; j < n; ++j) {
      row += std::exp(sim[i * n + j]);
      col += std::exp(sim[j * n + i]);
    }
    i2t += -(sim[i * n + i] - std::log(row));
    t2i += -(sim[i * n + i] - std::log(col));
  }
  return 0.5 * (i2t + t2i) / double(n);
}

// Breadth-first search over (x, y, heading) using only the three motion
// actions. Returns the number of actions until the agent faces a target.
inline int bfs_distance(const env::WorldState& s) {
  auto matches = [&](const env::Object& o) { return o.type == s.target.type && o.color == s.target.color; };
  auto blocked = [&](int x, int y) {
    if (x < 1 || y < 1 || x > 6 || y > 6) return true;
    for (const env::Object& o : s.objects)
      if (o.pos.x == x && o.pos.y == y) return true;
    return false;
  };
  auto faces_target = [&](int x, int y, int h) {
    const int fx = x + env::kHeadingDelta[h].x, fy = y + env::kHeadingDelta[h].y;
    for (const env::Object& o : s.objects)
      if (o.pos.x == fx && o.pos.y == fy && matches(o)) return true;
    return false;
  };
  std::array<int, 8 * 8 * 4> dist;
  dist.fill(-1);
  std::deque<std::array<int, 3>> queue{{s.agent.x, s.agent.y, static_cast<int>(s.heading)}};
  dist[(s.agent.y * 8 + s.agent.x) * 4 + static_cast<int>(s.heading)] = 0;
  while (!queue.empty()) {
    const auto [x, y, h] = queue.front();
    queue.pop_front();
    const int d = dist[(y * 8 + x) * 4 + h];
    const std::array<std::array<int, 3>, 3> next{{{x, y, (h + 3) % 4},
                                                   {x, y, (h + 1) % 4},
                                                   {x + env::kHeadingDelta[h].x, y + env::kHeadingDelta[h].y, h}}};
    for (auto n : next) {
      if (blocked(n[0], n[1])) n = {x, y, h};
      if (faces_target(n[0], n[1], n[2])) return d + 1;
      int& dn = dist[(n[1] * 8 + n[0]) * 4 + n[2]];
      if (dn < 0) {
        dn = d + 1;
        queue.push_back(n);
      }
    }
  }
  return -1;
}

}  // namespace pdit::oracles

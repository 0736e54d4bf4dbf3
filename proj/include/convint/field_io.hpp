#pragma once

// Field dumps.
//
// Binary layout (little-endian):
//   char[4]  "CVFD"
//   uint32   version (1)
//   uint32   N, res, components, slices
//   float64  times[slices]
//   float64  data[slices][components][res^N]   (row-major grid, axis 0 slowest)
//
// CSV: one row per grid point, columns x0..x{N-1}, c0..c{C-1}; one file per slice.

#include <cstdint>
#include <cstdio>
#include <fstream>
#include <ostream>
#include <stdexcept>
#include <string>

#include "convint/torus.hpp"

namespace convint {

namespace detail {
template <class T>
void put(std::ostream& os, T v) {
  os.write(reinterpret_cast<const char*>(&v), sizeof(T));
}
template <class T>
T get(std::istream& is) {
  T v{};
  is.read(reinterpret_cast<char*>(&v), sizeof(T));
  if (!is) throw std::runtime_error("truncated field file");
  return v;
}
}  // namespace detail

template <int N, int C>
void write_binary(std::ostream& os, const SpaceTimeField<N, C>& f) {
  os.write("CVFD", 4);
  detail::put<std::uint32_t>(os, 1);
  detail::put<std::uint32_t>(os, N);
  detail::put<std::uint32_t>(os, static_cast<std::uint32_t>(f.grid().res));
  detail::put<std::uint32_t>(os, C);
  detail::put<std::uint32_t>(os, static_cast<std::uint32_t>(f.nt()));
  for (double t : f.times) detail::put(os, t);
  for (const auto& s : f.slices) os.write(reinterpret_cast<const char*>(s.data.data()), s.data.size() * sizeof(double));
}

template <int N, int C>
void write_binary(std::ostream& os, const Field<N, C>& f) {
  SpaceTimeField<N, C> one;
  one.times = {0.0};
  one.slices = {f};
  write_binary(os, one);
}

template <int N, int C>
SpaceTimeField<N, C> read_binary(std::istream& is) {
  char magic[4];
  is.read(magic, 4);
  if (!is || std::string(magic, 4) != "CVFD") throw std::runtime_error("not a field dump");
  if (detail::get<std::uint32_t>(is) != 1) throw std::runtime_error("unsupported field dump version");
  const auto n = detail::get<std::uint32_t>(is);
  const auto res = detail::get<std::uint32_t>(is);
  const auto comps = detail::get<std::uint32_t>(is);
  const auto slices = detail::get<std::uint32_t>(is);
  if (n != N || comps != C) throw std::runtime_error("field dump shape mismatch");
  std::vector<double> times(slices);
  for (auto& t : times) t = detail::get<double>(is);
  SpaceTimeField<N, C> f(TorusGrid<N>(static_cast<int>(res)), times);
  for (auto& s : f.slices) {
    is.read(reinterpret_cast<char*>(s.data.data()), s.data.size() * sizeof(double));
    if (!is) throw std::runtime_error("truncated field file");
  }
  return f;
}

template <int N, int C>
void write_csv(std::ostream& os, const Field<N, C>& f) {
  char buf[64];
  for (int d = 0; d < N; ++d) os << (d ? "," : "") << "x" << d;
  for (int c = 0; c < C; ++c) os << ",c" << c;
  os << "\n";
  for (std::size_t p = 0; p < f.size(); ++p) {
    auto x = f.grid.point(p);
    for (int d = 0; d < N; ++d) {
      std::snprintf(buf, sizeof buf, "%s%.17g", d ? "," : "", x[d]);
      os << buf;
    }
    for (int c = 0; c < C; ++c) {
      std::snprintf(buf, sizeof buf, ",%.17g", f(c, p));
      os << buf;
    }
    os << "\n";
  }
}

}  // namespace convint

#pragma once

// ASCII PLY reader/writer for point clouds with x,y,z[,red,green,blue][,label]
// properties. Unknown properties are skipped with a warning on stderr.

#include <fstream>
#include <iostream>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "kpx/sampling.hpp"

namespace kpx {

// Reads a single-element stacked cloud. RGB (if present) becomes three
// feature channels kept in the file's 0-255 range; label fills labels.
inline StackedCloud read_ply(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw std::runtime_error("cannot open " + path);
  std::string line;
  if (!std::getline(f, line) || line.substr(0, 3) != "ply")
    throw std::runtime_error(path + ": not a PLY file");

  std::size_t vertex_count = 0;
  bool in_vertex_element = false;
  std::vector<std::string> props;
  bool header_done = false;
  while (std::getline(f, line)) {
    std::istringstream ls(line);
    std::string tok;
    ls >> tok;
    if (tok == "format") {
      std::string fmt;
      ls >> fmt;
      if (fmt != "ascii")
        throw std::runtime_error(path + ": unsupported format '" + fmt +
                                 "' (only ascii PLY is supported)");
    } else if (tok == "element") {
      std::string name;
      std::size_t n;
      ls >> name >> n;
      if (name == "vertex") {
        vertex_count = n;
        in_vertex_element = true;
      } else {
        in_vertex_element = false;
        if (n > 0)
          throw std::runtime_error(path + ": unsupported element '" + name +
                                   "'");
      }
    } else if (tok == "property" && in_vertex_element) {
      std::string type, name;
      ls >> type >> name;
      props.push_back(name);
    } else if (tok == "end_header") {
      header_done = true;
      break;
    }
  }
  if (!header_done) throw std::runtime_error(path + ": missing end_header");

  int ix = -1, iy = -1, iz = -1, ir = -1, ig = -1, ib = -1, il = -1;
  for (std::size_t i = 0; i < props.size(); ++i) {
    const std::string& p = props[i];
    if (p == "x") ix = int(i);
    else if (p == "y") iy = int(i);
    else if (p == "z") iz = int(i);
    else if (p == "red") ir = int(i);
    else if (p == "green") ig = int(i);
    else if (p == "blue") ib = int(i);
    else if (p == "label") il = int(i);
    else
      std::cerr << "warning: " << path << ": skipping unknown property '" << p
                << "'\n";
  }
  if (ix < 0 || iy < 0 || iz < 0)
    throw std::runtime_error(path + ": missing x/y/z vertex properties");
  const bool rgb = ir >= 0 && ig >= 0 && ib >= 0;

  StackedCloud cloud;
  cloud.feature_dim = rgb ? 3 : 0;
  std::vector<double> row(props.size());
  for (std::size_t v = 0; v < vertex_count; ++v) {
    if (!std::getline(f, line))
      throw std::runtime_error(path + ": truncated file, expected " +
                               std::to_string(vertex_count) +
                               " vertices, got " + std::to_string(v));
    std::istringstream ls(line);
    for (auto& r : row)
      if (!(ls >> r))
        throw std::runtime_error(path + ": malformed vertex line " +
                                 std::to_string(v));
    cloud.points.push_back({row[ix], row[iy], row[iz]});
    if (rgb) {
      cloud.features.push_back(float(row[ir]));
      cloud.features.push_back(float(row[ig]));
      cloud.features.push_back(float(row[ib]));
    }
    if (il >= 0) cloud.labels.push_back(int(row[il]));
  }
  cloud.lengths.push_back(vertex_count);
  cloud.check();
  return cloud;
}

// Writes a single-element cloud (or a whole stack flattened into one element).
inline void write_ply(const StackedCloud& cloud, const std::string& path) {
  cloud.check();
  const bool rgb = cloud.feature_dim >= 3;
  std::ofstream f(path);
  if (!f) throw std::runtime_error("cannot open " + path + " for writing");
  f << "ply\nformat ascii 1.0\n";
  f << "element vertex " << cloud.total() << "\n";
  f << "property float x\nproperty float y\nproperty float z\n";
  if (rgb)
    f << "property uchar red\nproperty uchar green\nproperty uchar blue\n";
  if (cloud.has_labels()) f << "property int label\n";
  f << "end_header\n";
  f.precision(7);
  for (std::size_t i = 0; i < cloud.total(); ++i) {
    f << cloud.points[i][0] << " " << cloud.points[i][1] << " "
      << cloud.points[i][2];
    if (rgb)
      f << " " << int(cloud.features[i * cloud.feature_dim]) << " "
        << int(cloud.features[i * cloud.feature_dim + 1]) << " "
        << int(cloud.features[i * cloud.feature_dim + 2]);
    if (cloud.has_labels()) f << " " << cloud.labels[i];
    f << "\n";
  }
}

}  // namespace kpx

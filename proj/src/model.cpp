#include "haan/model.hpp"

#include <sstream>
#include <stdexcept>

namespace haan {

std::string to_string(DistanceKind d) { return d == DistanceKind::cosine ? "cosine" : "euclidean"; }
std::string to_string(ComposeMode m) { return m == ComposeMode::mean ? "mean" : "max"; }

DistanceKind distance_from_string(const std::string& s) {
  if (s == "cosine") return DistanceKind::cosine;
  if (s == "euclidean") return DistanceKind::euclidean;
  throw std::invalid_argument("unknown distance '" + s + "' (expected cosine or euclidean)");
}

ComposeMode compose_from_string(const std::string& s) {
  if (s == "mean") return ComposeMode::mean;
  if (s == "max") return ComposeMode::max;
  throw std::invalid_argument("unknown compose mode '" + s + "' (expected mean or max)");
}

std::string LossSet::str() const {
  std::string out;
  for (std::size_t i = 0; i < enabled.size(); ++i) {
    if (!enabled[i]) continue;
    if (!out.empty()) out += ",";
    out += kLossNames[i];
  }
  return out;
}

LossSet LossSet::parse(const std::string& csv) {
  LossSet set{{false, false, false, false}};
  std::stringstream ss(csv);
  std::string item;
  while (std::getline(ss, item, ',')) {
    const auto b = item.find_first_not_of(" \t");
    const auto e = item.find_last_not_of(" \t");
    if (b == std::string::npos) continue;
    item = item.substr(b, e - b + 1);
    bool found = false;
    for (std::size_t i = 0; i < kLossNames.size(); ++i) {
      if (item == kLossNames[i]) {
        set.enabled[i] = true;
        found = true;
      }
    }
    if (!found) throw std::invalid_argument("unknown loss term '" + item + "'");
  }
  if (!set.has(LossTerm::mil)) throw std::invalid_argument("loss set must contain mil");
  return set;
}

}  // namespace haan

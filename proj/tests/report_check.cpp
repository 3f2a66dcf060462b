// report_check DIR: report.json and report.csv must carry the same AP values.
#include <cmath>
#include <cstdio>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "json.hpp"

int main(int argc, char** argv) {
  if (argc != 2) {
    std::fprintf(stderr, "usage: report_check DIR\n");
    return 2;
  }
  const std::string dir = argv[1];
  std::ifstream jf(dir + "/report.json");
  const nlohmann::json j = nlohmann::json::parse(jf);

  // key: task/metric/block
  std::map<std::string, double> csv;
  std::ifstream cf(dir + "/report.csv");
  std::string line;
  std::getline(cf, line);
  while (std::getline(cf, line)) {
    std::vector<std::string> f;
    std::string cur;
    bool quoted = false;
    for (char c : line) {
      if (c == '"') quoted = !quoted;
      else if (c == ',' && !quoted) f.push_back(cur), cur.clear();
      else cur += c;
    }
    f.push_back(cur);
    if (f.size() != 5) {
      std::fprintf(stderr, "bad csv row: %s\n", line.c_str());
      return 1;
    }
    csv[f[0] + "/" + f[2] + "/" + f[3]] = std::stod(f[4]);
  }

  int checked = 0, bad = 0;
  auto compare = [&](const std::string& key, double v) {
    auto it = csv.find(key);
    if (it == csv.end() || std::abs(it->second - v) > 1e-12) {
      std::fprintf(stderr, "mismatch at %s\n", key.c_str());
      ++bad;
    }
    ++checked;
  };
  for (const auto& t : j.at("tasks")) {
    const std::string task = std::to_string(t.at("task").get<int>());
    compare(task + "/ap_box/final", t.at("ap_box").get<double>());
    compare(task + "/ap_mask/final", t.at("ap_mask").get<double>());
    if (t.contains("block_ap_box"))
      for (std::size_t b = 0; b < t.at("block_ap_box").size(); ++b)
        compare(task + "/ap_box/" + std::to_string(b), t.at("block_ap_box")[b].get<double>());
    if (t.contains("block_ap_mask"))
      for (std::size_t b = 0; b < t.at("block_ap_mask").size(); ++b)
        compare(task + "/ap_mask/" + std::to_string(b), t.at("block_ap_mask")[b].get<double>());
  }
  if (checked != static_cast<int>(csv.size())) {
    std::fprintf(stderr, "csv has %zu rows, json %d values\n", csv.size(), checked);
    return 1;
  }
  std::printf("%d values agree\n", checked);
  return bad == 0 ? 0 : 1;
}

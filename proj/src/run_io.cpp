#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>

#include <json.hpp>

#include "onda/harness.hpp"

namespace onda {

namespace fs = std::filesystem;

namespace {

std::string fmt(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

std::string fixed(double v, int digits) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.*f", digits, v);
  return buf;
}

void write_file(const fs::path& p, const std::string& text) {
  std::ofstream out(p, std::ios::binary);
  if (!out) throw Error("cannot write '" + p.string() + "'");
  out << text;
}

std::string read_file(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  if (!in) throw FormatError("missing run file '" + p.string() + "'");
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

std::vector<std::string> split(const std::string& line, char sep) {
  std::vector<std::string> out;
  std::string cur;
  std::istringstream is(line);
  while (std::getline(is, cur, sep)) out.push_back(cur);
  return out;
}

std::string row_csv(const TableRow& row) {
  std::string s = row.method;
  for (double v : row.values) s += "," + fmt(v);
  return s + "," + fmt(row.hmean) + "," + (row.hmean_zero ? "1" : "0") + "\n";
}

std::string header_csv(const std::vector<int>& levels) {
  std::string s = "method";
  for (int l : levels) s += ",L" + std::to_string(l);
  return s + ",hmean,hmean_zero\n";
}

std::string confusion_csv(const Confusion& cm) {
  std::string s;
  for (Eigen::Index r = 0; r < cm.rows(); ++r) {
    for (Eigen::Index c = 0; c < cm.cols(); ++c) s += (c ? "," : "") + std::to_string(cm(r, c));
    s += "\n";
  }
  return s;
}

struct ParsedTable {
  std::vector<std::string> header;
  std::vector<TableRow> rows;
};

ParsedTable parse_table(const std::string& text, const std::string& where) {
  ParsedTable t;
  std::istringstream is(text);
  std::string line;
  if (!std::getline(is, line)) throw FormatError(where + ": empty table");
  t.header = split(line, ',');
  if (t.header.size() < 3 || t.header.front() != "method") throw FormatError(where + ": bad header");
  const std::size_t ncols = t.header.size() - 3;
  while (std::getline(is, line)) {
    if (line.empty()) continue;
    const std::vector<std::string> f = split(line, ',');
    if (f.size() != t.header.size()) throw FormatError(where + ": row width mismatch");
    TableRow row;
    row.method = f[0];
    try {
      for (std::size_t i = 0; i < ncols; ++i) {
        row.levels.push_back(std::stoi(t.header[1 + i].substr(1)));
        row.values.push_back(std::stod(f[1 + i]));
      }
      row.hmean = std::stod(f[1 + ncols]);
      row.hmean_zero = f[2 + ncols] == "1";
    } catch (const std::exception&) {
      throw FormatError(where + ": unparsable value");
    }
    if (!row.values.empty()) {
      const HMean h = hmean(row.values);
      if (std::abs(h.value - row.hmean) > 1e-9) throw FormatError(where + ": logged h-mean disagrees with row values");
    }
    t.rows.push_back(std::move(row));
  }
  return t;
}

std::string text_table(const std::string& title, const std::vector<std::string>& header,
                       const std::vector<TableRow>& rows) {
  const std::size_t ncols = header.size() - 3;
  std::vector<double> best(ncols + 1, -1.0);
  for (const TableRow& r : rows) {
    for (std::size_t i = 0; i < ncols; ++i) best[i] = std::max(best[i], r.values[i]);
    best[ncols] = std::max(best[ncols], r.hmean);
  }
  std::size_t name_w = 6;
  for (const TableRow& r : rows) name_w = std::max(name_w, r.method.size());
  auto cell = [](const std::string& s) {
    std::string out(10 > s.size() ? 10 - s.size() : 0, ' ');
    return out + s;
  };
  auto mark = [](double v, double b) {
    const std::string s = fixed(v, 1);
    return fixed(v, 1) == fixed(b, 1) ? "**" + s + "**" : s;
  };
  std::string s = title + "\n" + std::string(name_w, ' ');
  for (std::size_t i = 0; i < ncols; ++i) s += cell(header[1 + i]);
  s += cell("h-mean") + "\n";
  for (const TableRow& r : rows) {
    s += r.method + std::string(name_w - r.method.size(), ' ');
    for (std::size_t i = 0; i < ncols; ++i) s += cell(mark(r.values[i], best[i]));
    s += cell(mark(r.hmean, best[ncols])) + "\n";
  }
  return s;
}

}  // namespace

void write_run(const std::string& dir, const RunConfig& cfg, const RunResult& r, const Benchmark& bench) {
  const fs::path root(dir);
  fs::create_directories(root / "confusion");
  write_file(root / "config.json", config_to_json(cfg) + "\n");
  write_file(root / "schedule.json", schedule_to_json(bench.schedule) + "\n");

  const TableRow fwd = forward_row(r, bench.schedule);
  const TableRow bwd = backward_row(r, bench.schedule);
  write_file(root / "results_forward.csv", header_csv(fwd.levels) + row_csv(fwd));
  const bool has_backward = cfg.mode != RunMode::Offline && cfg.mode != RunMode::Supervised;
  if (has_backward && !bwd.values.empty()) write_file(root / "results_backward.csv", header_csv(bwd.levels) + row_csv(bwd));

  std::string evals = "step,segment,level,pass";
  for (std::size_t l = 0; l < bench.validation.size(); ++l) evals += ",L" + std::to_string(l);
  evals += "\n";
  for (std::size_t i = 0; i < r.evals.size(); ++i) {
    const EvalRecord& e = r.evals[i];
    evals += std::to_string(e.step) + "," + std::to_string(e.segment) + "," + std::to_string(e.level) + "," +
             to_string(e.pass);
    for (std::size_t l = 0; l < e.eval.miou.size(); ++l) {
      evals += "," + fmt(100.0 * e.eval.miou[l]);
      write_file(root / "confusion" / ("eval" + std::to_string(i) + "_L" + std::to_string(l) + ".csv"),
                 confusion_csv(e.eval.confusions[l]));
    }
    evals += "\n";
  }
  write_file(root / "evals.csv", evals);

  std::string steps;
  for (const StepReport& s : r.steps) {
    nlohmann::ordered_json j{{"step", s.step},         {"domain_truth", s.domain_truth}, {"z", s.z},
                             {"mu", s.mu},             {"I", s.indicator},              {"delta", s.delta},
                             {"loss_task", s.loss_task}, {"loss_pseudo", s.loss_pseudo},  {"loss_reg", s.loss_reg}};
    steps += j.dump() + "\n";
  }
  write_file(root / "steps.jsonl", steps);

  std::string events;
  for (const SwitchEvent& e : r.events) {
    nlohmann::json j{{"t", e.t}, {"direction", to_string(e.direction)}, {"mu", e.mu}, {"z", e.z}};
    events += j.dump() + "\n";
  }
  write_file(root / "events.jsonl", events);

  if (cfg.buffer_capacity > 0) {
    write_file(root / "buffer_manifest.json",
               ReplayBuffer::build(bench.source_train, cfg.buffer_capacity, cfg.buffer_seed).manifest_json() + "\n");
  }
}

Report report(const std::vector<std::string>& run_dirs) {
  if (run_dirs.empty()) throw ConfigError("report: no run directories");
  std::map<std::string, std::vector<std::string>> headers;
  std::map<std::string, std::vector<TableRow>> rows;
  Report out;
  out.series_csv = "method,step,level,miou\n";
  for (const std::string& d : run_dirs) {
    for (const std::string pass : {"forward", "backward"}) {
      const fs::path p = fs::path(d) / ("results_" + pass + ".csv");
      if (pass == "backward" && !fs::exists(p)) continue;
      ParsedTable t = parse_table(read_file(p), p.string());
      if (headers.count(pass) && headers[pass] != t.header) {
        throw FormatError("report: " + p.string() + " has a different column set");
      }
      headers[pass] = t.header;
      for (TableRow& r : t.rows) rows[pass].push_back(std::move(r));
    }
    const std::string method = rows["forward"].back().method;
    std::istringstream evals(read_file(fs::path(d) / "evals.csv"));
    std::string line;
    std::getline(evals, line);
    const std::vector<std::string> head = split(line, ',');
    while (std::getline(evals, line)) {
      const std::vector<std::string> f = split(line, ',');
      if (f.size() != head.size()) throw FormatError("report: corrupt evals.csv in " + d);
      for (std::size_t i = 4; i < f.size(); ++i) out.series_csv += method + "," + f[0] + "," + head[i] + "," + f[i] + "\n";
    }
  }
  auto csv = [&](const std::string& pass) {
    std::string s;
    if (!headers.count(pass)) return s;
    for (std::size_t i = 0; i < headers[pass].size(); ++i) s += (i ? "," : "") + headers[pass][i];
    s += "\n";
    for (const TableRow& r : rows[pass]) s += row_csv(r);
    return s;
  };
  out.forward_csv = csv("forward");
  out.backward_csv = csv("backward");
  out.text = text_table("Forward pass (mIoU %)", headers["forward"], rows["forward"]);
  if (headers.count("backward")) {
    out.text += "\n" + text_table("Backward pass (mIoU %)", headers["backward"], rows["backward"]);
  }
  return out;
}

}  // namespace onda

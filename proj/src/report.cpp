#include "diffender/report.hpp"

#include <cmath>
#include <cstdio>
#include <fstream>
#include <limits>
#include <sstream>

#include <json.hpp>

#include "diffender/common.hpp"

namespace fs = std::filesystem;
using json = nlohmann::json;

namespace diffender {
namespace {

std::string fixed6(double v) {
  if (std::isnan(v)) {
    return "nan";
  }
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.6f", v);
  return buf;
}

double parse_real(const std::string& s) {
  if (s == "nan") {
    return std::numeric_limits<double>::quiet_NaN();
  }
  return std::stod(s);
}

std::ofstream open_for_write(const fs::path& path) {
  if (path.has_parent_path()) {
    std::error_code ec;
    fs::create_directories(path.parent_path(), ec);
  }
  std::ofstream out(path, std::ios::trunc);
  if (!out) {
    throw IoError("cannot write report " + path.string());
  }
  return out;
}

json to_json(const DefenseReport& r) {
  json j;
  j["experiment"] = r.experiment;
  j["defense"] = r.defense;
  j["attack"] = r.attack;
  j["clean_acc"] = r.clean_acc;
  j["robust_acc"] = r.robust_acc;
  j["asr"] = r.asr;
  j["mean_iou"] = std::isnan(r.mean_iou) ? json(nullptr) : json(r.mean_iou);
  j["runtime_s"] = r.runtime_s;
  j["stage_seconds"] = r.stage_seconds;
  j["config_hash"] = r.config_hash;
  j["rows"] = json::array();
  for (const auto& row : r.rows) {
    j["rows"].push_back({{"index", row.index},
                         {"label", row.label},
                         {"clean_pred", row.clean_pred},
                         {"robust_pred", row.robust_pred},
                         {"attack_success", row.attack_success},
                         {"gated", row.gated},
                         {"mask_iou", row.mask_iou},
                         {"mask_area", row.mask_area}});
  }
  return j;
}

}  // namespace

std::string report_csv_row(const DefenseReport& r) {
  std::ostringstream os;
  os << r.experiment << ',' << r.defense << ',' << r.attack << ',' << fixed6(r.clean_acc) << ','
     << fixed6(r.robust_acc) << ',' << fixed6(r.asr) << ',' << fixed6(r.mean_iou) << ','
     << fixed6(r.runtime_s);
  return os.str();
}

void write_report(const DefenseReport& report, const fs::path& path, ReportFormat format) {
  auto out = open_for_write(path);
  if (format == ReportFormat::csv) {
    out << kReportCsvHeader << '\n' << report_csv_row(report) << '\n';
  } else {
    out << to_json(report).dump(2) << '\n';
  }
  if (!out) {
    throw IoError("short write on report " + path.string());
  }
}

void write_reports_csv(const std::vector<DefenseReport>& reports, const fs::path& path) {
  auto out = open_for_write(path);
  out << kReportCsvHeader << '\n';
  for (const auto& r : reports) {
    out << report_csv_row(r) << '\n';
  }
  if (!out) {
    throw IoError("short write on report " + path.string());
  }
}

std::vector<DefenseReport> read_reports_csv(const fs::path& path) {
  std::ifstream in(path);
  if (!in) {
    throw MissingArtifactError("report not found: " + path.string());
  }
  std::string line;
  std::getline(in, line);
  if (line != kReportCsvHeader) {
    throw FormatError("unexpected report header in " + path.string());
  }
  std::vector<DefenseReport> out;
  while (std::getline(in, line)) {
    if (line.empty()) {
      continue;
    }
    std::vector<std::string> cells;
    std::stringstream ss(line);
    std::string cell;
    while (std::getline(ss, cell, ',')) {
      cells.push_back(cell);
    }
    if (cells.size() != 8) {
      throw FormatError("malformed report row: " + line);
    }
    DefenseReport r;
    r.experiment = cells[0];
    r.defense = cells[1];
    r.attack = cells[2];
    r.clean_acc = parse_real(cells[3]);
    r.robust_acc = parse_real(cells[4]);
    r.asr = parse_real(cells[5]);
    r.mean_iou = parse_real(cells[6]);
    r.runtime_s = parse_real(cells[7]);
    out.push_back(std::move(r));
  }
  return out;
}

DefenseReport read_report_json(const fs::path& path) {
  std::ifstream in(path);
  if (!in) {
    throw MissingArtifactError("report not found: " + path.string());
  }
  json j;
  try {
    j = json::parse(in);
    DefenseReport r;
    r.experiment = j.at("experiment");
    r.defense = j.at("defense");
    r.attack = j.at("attack");
    r.clean_acc = j.at("clean_acc");
    r.robust_acc = j.at("robust_acc");
    r.asr = j.at("asr");
    r.mean_iou = j.at("mean_iou").is_null() ? std::numeric_limits<double>::quiet_NaN()
                                            : j.at("mean_iou").get<double>();
    r.runtime_s = j.at("runtime_s");
    r.stage_seconds = j.at("stage_seconds").get<std::map<std::string, double>>();
    r.config_hash = j.at("config_hash");
    for (const auto& row : j.at("rows")) {
      ImageRow ir;
      ir.index = row.at("index");
      ir.label = row.at("label");
      ir.clean_pred = row.at("clean_pred");
      ir.robust_pred = row.at("robust_pred");
      ir.attack_success = row.at("attack_success");
      ir.gated = row.at("gated");
      ir.mask_iou = row.at("mask_iou");
      ir.mask_area = row.at("mask_area");
      r.rows.push_back(ir);
    }
    return r;
  } catch (const json::exception& e) {
    throw FormatError(std::string("malformed JSON report: ") + e.what());
  }
}

std::string render_summary_table(const std::vector<DefenseReport>& reports) {
  std::ostringstream os;
  os << "| experiment | defense | attack | clean | robust | ASR | mIoU | time (s) |\n";
  os << "|---|---|---|---|---|---|---|---|\n";
  char buf[256];
  for (const auto& r : reports) {
    std::snprintf(buf, sizeof buf, "| %s | %s | %s | %.1f | %.1f | %.1f | %s | %.1f |\n",
                  r.experiment.c_str(), r.defense.c_str(), r.attack.c_str(), 100 * r.clean_acc,
                  100 * r.robust_acc, 100 * r.asr,
                  std::isnan(r.mean_iou) ? "-" : fixed6(r.mean_iou).substr(0, 5).c_str(), r.runtime_s);
    os << buf;
  }
  return os.str();
}

}  // namespace diffender

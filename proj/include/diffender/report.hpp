#pragma once

#include <filesystem>
#include <map>
#include <string>
#include <vector>

namespace diffender {

/// Per-image evaluation record.
struct ImageRow {
  std::int64_t index = 0;
  std::int64_t label = 0;
  std::int64_t clean_pred = 0;     ///< prediction on the defended clean image
  std::int64_t robust_pred = 0;    ///< prediction on the defended attacked image
  bool attack_success = false;     ///< attack fooled the (defended) model
  bool gated = false;              ///< restoration ran on the attacked image
  double mask_iou = 0.0;
  double mask_area = 0.0;
};

struct DefenseReport {
  std::string experiment;
  std::string defense;
  std::string attack;
  double clean_acc = 0.0;
  double robust_acc = 0.0;
  double asr = 0.0;
  double mean_iou = 0.0;  ///< NaN when the defense produces no masks
  double runtime_s = 0.0;
  std::map<std::string, double> stage_seconds;
  std::string config_hash;
  std::vector<ImageRow> rows;
};

enum class ReportFormat { csv, json };

/// Fixed combined-table header.
inline constexpr const char* kReportCsvHeader =
    "experiment,defense,attack,clean_acc,robust_acc,asr,mean_iou,runtime_s";

/// One CSV row (no newline); reals use six decimals.
std::string report_csv_row(const DefenseReport& report);

/// CSV: header plus the summary row. JSON keys: experiment, defense, attack,
/// clean_acc, robust_acc, asr, mean_iou, runtime_s, stage_seconds,
/// config_hash, rows[] (index, label, clean_pred, robust_pred,
/// attack_success, gated, mask_iou, mask_area).
void write_report(const DefenseReport& report, const std::filesystem::path& path, ReportFormat format);

/// Combined CSV for several reports; an empty list yields the header alone.
void write_reports_csv(const std::vector<DefenseReport>& reports, const std::filesystem::path& path);

std::vector<DefenseReport> read_reports_csv(const std::filesystem::path& path);
DefenseReport read_report_json(const std::filesystem::path& path);

/// Markdown-style summary table of several reports.
std::string render_summary_table(const std::vector<DefenseReport>& reports);

}  // namespace diffender

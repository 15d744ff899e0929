#ifndef LLATTE_DATASET_IO_HPP_
#define LLATTE_DATASET_IO_HPP_

#include <fstream>
#include <memory>
#include <string>
#include <vector>

#include <json.hpp>

#include "llatte/common.hpp"
#include "llatte/events.hpp"

namespace llatte {

namespace detail {

// Serialized numbers carry 9 significant digits; the writer is hand-rolled
// so key order and float formatting stay byte-stable across platforms.
inline void append_number(std::string& out, double v) {
  char buf[40];
  std::snprintf(buf, sizeof(buf), "%.9g", v);
  out += buf;
}

inline void append_vec(std::string& out, const std::vector<double>& v) {
  out += '[';
  for (size_t i = 0; i < v.size(); ++i) {
    if (i) out += ',';
    append_number(out, v[i]);
  }
  out += ']';
}

}  // namespace detail

// One labeled example as a single JSON line. Only the snapshot visible at
// request time is written; generator-internal state never leaves memory.
inline std::string example_to_jsonl(const LabeledExample& ex) {
  std::string s;
  s.reserve(1024);
  s += "{\"user_id\":";
  s += std::to_string(ex.user->user_id);
  s += ",\"request_time_s\":";
  s += std::to_string(ex.context.request_time_s);
  s += ",\"events\":[";
  for (int i = 0; i < ex.visible_count; ++i) {
    const ActionEvent& e = ex.user->events[i];
    if (i) s += ',';
    s += "{\"t\":";
    s += std::to_string(e.timestamp_s);
    s += ",\"type\":\"";
    s += action_type_name(e.action_type);
    s += "\",\"item\":";
    s += std::to_string(e.item_id);
    s += ",\"surface\":";
    s += std::to_string(e.surface_id);
    s += ",\"content\":";
    if (e.has_content) detail::append_vec(s, e.content_vec);
    else s += "null";
    s += ",\"meta\":";
    s += std::to_string(e.meta_id);
    s += '}';
  }
  s += "],\"candidate\":{\"ad\":";
  s += std::to_string(ex.candidate.ad_id);
  s += ",\"advertiser\":";
  s += std::to_string(ex.candidate.advertiser_id);
  s += ",\"content\":";
  detail::append_vec(s, ex.candidate.content_vec);
  s += "},\"context\":{\"surface\":";
  s += std::to_string(ex.context.surface_id);
  s += ",\"device\":";
  s += std::to_string(ex.context.device_id);
  s += ",\"cross\":";
  detail::append_vec(s, ex.cross_features);
  s += "},\"labels\":{\"ctr\":";
  s += ex.label_ctr ? '1' : '0';
  s += ",\"cvr\":";
  s += ex.label_cvr ? '1' : '0';
  s += "}}";
  return s;
}

inline void write_jsonl(const std::string& path, const std::vector<LabeledExample>& examples) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError(strfmt("cannot open '%s' for writing", path.c_str()));
  for (const LabeledExample& ex : examples) {
    out << example_to_jsonl(ex) << '\n';
    if (!out) throw IoError(strfmt("write failed on '%s'", path.c_str()));
  }
}

inline std::vector<LabeledExample> read_jsonl(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError(strfmt("cannot open '%s' for reading", path.c_str()));
  std::vector<LabeledExample> out;
  std::string line;
  size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(line);
    } catch (const nlohmann::json::exception& e) {
      throw IoError(strfmt("%s:%zu: invalid JSON: %s", path.c_str(), lineno, e.what()));
    }
    try {
      LabeledExample ex;
      auto hist = std::make_shared<UserHistory>();
      hist->user_id = j.at("user_id").get<int64_t>();
      for (const nlohmann::json& je : j.at("events")) {
        ActionEvent e;
        e.timestamp_s = je.at("t").get<int64_t>();
        e.action_type = action_type_from_name(je.at("type").get<std::string>());
        e.item_id = je.at("item").get<int>();
        e.surface_id = je.at("surface").get<int>();
        if (!je.at("content").is_null()) {
          e.has_content = true;
          e.content_vec = je.at("content").get<std::vector<double>>();
        }
        e.meta_id = je.at("meta").get<int>();
        hist->events.push_back(std::move(e));
      }
      hist->check_sorted();
      ex.user = hist;
      ex.visible_count = static_cast<int>(hist->events.size());
      ex.context.request_time_s = j.at("request_time_s").get<int64_t>();
      const nlohmann::json& jc = j.at("candidate");
      ex.candidate.ad_id = jc.at("ad").get<int>();
      ex.candidate.advertiser_id = jc.at("advertiser").get<int>();
      ex.candidate.content_vec = jc.at("content").get<std::vector<double>>();
      const nlohmann::json& jx = j.at("context");
      ex.context.surface_id = jx.at("surface").get<int>();
      ex.context.device_id = jx.at("device").get<int>();
      ex.cross_features = jx.at("cross").get<std::vector<double>>();
      const nlohmann::json& jl = j.at("labels");
      ex.label_ctr = jl.at("ctr").get<int>() != 0;
      ex.label_cvr = jl.at("cvr").get<int>() != 0;
      if (ex.label_cvr && !ex.label_ctr)
        throw ValueError("cvr label set without ctr label");
      out.push_back(std::move(ex));
    } catch (const nlohmann::json::exception& e) {
      throw IoError(strfmt("%s:%zu: missing or mistyped field: %s", path.c_str(), lineno, e.what()));
    } catch (const ValueError& e) {
      throw IoError(strfmt("%s:%zu: %s", path.c_str(), lineno, e.what()));
    }
  }
  return out;
}

}  // namespace llatte

#endif  // LLATTE_DATASET_IO_HPP_

#pragma once

#include <algorithm>
#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

namespace feddeo {

/// Upload cost of one method. Payload values are f32, so
/// bytes == parameters * 4.
struct CommRecord {
  std::string method;
  std::uint64_t uploaded_bytes = 0;
  std::uint64_t parameters = 0;
  int rounds = 0;
};

class CommLedger {
 public:
  /// Adds `parameters` f32 values uploaded over `rounds` for `method`,
  /// accumulating into an existing record.
  void record(const std::string& method, std::uint64_t parameters, int rounds) {
    for (CommRecord& r : records_) {
      if (r.method == method) {
        r.parameters += parameters;
        r.uploaded_bytes += parameters * 4;
        r.rounds = std::max(r.rounds, rounds);
        return;
      }
    }
    records_.push_back({method, parameters * 4, parameters, rounds});
  }

  const CommRecord& at(const std::string& method) const {
    for (const CommRecord& r : records_)
      if (r.method == method) return r;
    throw std::out_of_range("ledger: no record for method '" + method + "'");
  }
  bool contains(const std::string& method) const {
    for (const CommRecord& r : records_)
      if (r.method == method) return true;
    return false;
  }
  const std::vector<CommRecord>& records() const { return records_; }

 private:
  std::vector<CommRecord> records_;
};

}  // namespace feddeo

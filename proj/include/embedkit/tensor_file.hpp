#pragma once

// Named-tensor binary container, the same little-endian framing style as the
// feature bank format but holding f64 sections:
//   magic   "GUET"          4 bytes
//   version u32 = 1
//   count   u32             number of sections
//   section u16 name_len, name bytes, u32 rows, u32 cols, rows*cols f64
//
// Used for model checkpoints and persisted PCA models. Section order is
// preserved, so identical contents produce identical bytes.

#include <string>
#include <utility>
#include <vector>

#include "embedkit/numkit.hpp"

namespace embedkit {

class TensorFile {
public:
    void put(const std::string& name, Matrix value);
    void put_scalar(const std::string& name, double value);

    bool has(const std::string& name) const;
    const Matrix& get(const std::string& name) const;  // throws if missing
    double get_scalar(const std::string& name) const;  // 1x1 section

    const std::vector<std::pair<std::string, Matrix>>& sections() const { return sections_; }

    void save(const std::string& path) const;
    static TensorFile load(const std::string& path);

private:
    std::vector<std::pair<std::string, Matrix>> sections_;
};

}  // namespace embedkit

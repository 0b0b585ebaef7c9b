#ifndef CISRDCNN_TESTS_FIXTURES_HPP
#define CISRDCNN_TESTS_FIXTURES_HPP

#include <fstream>
#include <map>
#include <stdexcept>
#include <string>

#include "cisrdcnn/image.hpp"

namespace fixtures {

inline std::string path(const std::string& rel) { return std::string(CISRDCNN_TEST_DATA) + "/" + rel; }

/// Reads "rows cols" followed by rows*cols whitespace-separated reals.
inline cisr::Plane read_matrix(const std::string& rel)
{
    std::ifstream in(path(rel));
    if (!in)
        throw std::runtime_error("missing fixture " + rel);
    std::size_t rows = 0, cols = 0;
    in >> rows >> cols;
    cisr::Plane p(cols, rows);
    for (double& v : p.values)
        in >> v;
    if (!in)
        throw std::runtime_error("short fixture " + rel);
    return p;
}

/// Reads "key value" lines.
inline std::map<std::string, double> read_values(const std::string& rel)
{
    std::ifstream in(path(rel));
    if (!in)
        throw std::runtime_error("missing fixture " + rel);
    std::map<std::string, double> out;
    std::string k;
    double v = 0;
    while (in >> k >> v)
        out[k] = v;
    return out;
}

}  // namespace fixtures

#endif  // CISRDCNN_TESTS_FIXTURES_HPP

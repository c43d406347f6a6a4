#include "mmseg/binary_io.hpp"

#include <cerrno>
#include <filesystem>
#include <fstream>
#include <system_error>

namespace mmseg::bin {

std::vector<char> read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary | std::ios::ate);
  if (!in) throw IoError("cannot open " + path);
  const auto size = static_cast<std::size_t>(in.tellg());
  std::vector<char> buf(size);
  in.seekg(0);
  if (size && !in.read(buf.data(), static_cast<std::streamsize>(size))) throw IoError("cannot read " + path);
  return buf;
}

void write_file_atomic(const std::string& path, const std::vector<char>& bytes) {
  const std::string partial = path + ".partial";
  {
    std::ofstream out(partial, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot write " + partial);
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    out.flush();
    if (!out) {
      std::error_code ignored;
      std::filesystem::remove(partial, ignored);
      throw IoError("failed writing " + partial);
    }
  }
  std::error_code ec;
  std::filesystem::rename(partial, path, ec);
  if (ec) throw IoError("cannot rename " + partial + " to " + path + ": " + ec.message());
}

void write_file_atomic(const std::string& path, std::string_view text) {
  write_file_atomic(path, std::vector<char>(text.begin(), text.end()));
}

}  // namespace mmseg::bin

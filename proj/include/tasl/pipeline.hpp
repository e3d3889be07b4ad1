#pragma once

#include <filesystem>
#include <functional>
#include <string>
#include <vector>

#include <json.hpp>

#include "tasl/eedetect.hpp"
#include "tasl/synthgen.hpp"
#include "tasl/ticselect.hpp"

namespace tasl {

struct PrepOptions {
  tic::SelectOptions select;
  detect::DetectOptions detect;
  int video_size = 224;  // per-modality side after resizing; the pair is placed side by side
};

/// One case reduced to network inputs: the six earliest-enhanced TICs and the
/// sampled bimodal clip resized to [F, S, 2S] (gray-scale, left half GSUS).
struct PreparedCase {
  std::string id;
  int label = -1;
  std::vector<double> clinical;
  tic::ClipSelection selection;
  detect::EarliestEnhancedSet set;
  std::vector<double> tics;   // [6, F], intensity units
  std::vector<double> video;  // [F, S, 2S], intensity units
  int frames = 0;
  int side = 0;
};

/// Stable digest of the options that influence preprocessing.
std::string prep_key(const PrepOptions& options);

/// Clip selection, earliest-enhanced detection and resizing. The intermediate
/// results are copied out when the pointers are given.
PreparedCase prepare_case(const synth::Case& c, const std::string& id, const PrepOptions& options,
                          tic::SelectResult* selection = nullptr, detect::DetectResult* detection = nullptr);

/// Side-by-side area-resized clip, [F, S, 2S].
std::vector<double> side_by_side(const BimodalVideo& clip, int side);

/// Loads `case_dir`, reusing `<cache_dir>/<id>.tarc` when it was written with
/// the same options and source manifest. An empty cache_dir disables caching.
PreparedCase load_prepared(const std::filesystem::path& case_dir, const std::filesystem::path& cache_dir,
                           const PrepOptions& options);

void save_prepared(const std::filesystem::path& path, const PreparedCase& p, const std::string& source_hash,
                   const std::string& key);
/// Returns false if the file is missing or was produced from other inputs.
bool load_prepared_file(const std::filesystem::path& path, const std::string& source_hash, const std::string& key,
                        PreparedCase& out);

/// Case directories (those holding a manifest.json) below `dataset`, sorted by name.
std::vector<std::filesystem::path> list_cases(const std::filesystem::path& dataset);

nlohmann::json selection_json(const tic::ClipSelection& s);
tic::ClipSelection selection_from_json(const nlohmann::json& j);

/// positions.json body: group, cell, TTS and TIC per entry.
nlohmann::json positions_json(const detect::DetectResult& r);

struct Violation {
  std::string kind;  // error class, e.g. FormatError
  std::string message;
};

/// Checks manifest/frame consistency, PNG decoding, geometry and the
/// ground-truth invariants of one case directory. Never throws for bad data.
std::vector<Violation> validate_case_dir(const std::filesystem::path& dir);

/// Sampled copy of a case: the clip frames, with the analytic mean TIC
/// gathered at the same indices and its start/peak recomputed.
synth::Case sampled_case(const synth::Case& c, const tic::SelectResult& sel);

/// Runs fn(0..n-1) on up to `jobs` threads; the first exception is rethrown.
void parallel_for(std::size_t n, int jobs, const std::function<void(std::size_t)>& fn);

/// Hex SHA-1 of a byte string / of a file.
std::string sha1_hex(const std::string& bytes);
std::string sha1_file(const std::filesystem::path& path);
/// Git-style tree digest: SHA-1 over (relative path, file digest) of every
/// regular file below `root` in sorted order. A plain file hashes its content.
std::string tree_hash(const std::filesystem::path& root);

}  // namespace tasl

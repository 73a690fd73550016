#pragma once

#include <filesystem>
#include <string>
#include <vector>

#include "patchlab/policy.hpp"

namespace patchlab::policy {

// One re-plan step of a recorded episode. Serialized one record per line as
// space-separated tagged fields:
//   task:<id> seed:<n> step:<n> instr:<t,..> cot:<t,..> act:<d:<tok>|c:<dx,dy,g;..>>
//   succ:<0|1> obs:<relative path or ->
// Floats are printed with %.17g and round-trip exactly.
struct DatasetRecord {
    std::string task_id;
    std::uint64_t layout_seed = 0;
    int step = 0;
    Instruction instr;
    CoT cot;
    Action::Kind action_kind = Action::Kind::Discrete;
    int disc_token = 0;
    std::vector<std::array<double, 3>> chunk;
    bool success = false;
    std::string obs_ref = "-";
};

void write_dataset(const std::vector<DatasetRecord>& records, const std::filesystem::path& path);
std::vector<DatasetRecord> read_dataset(const std::filesystem::path& path);

std::string encode_record(const DatasetRecord& rec);
DatasetRecord decode_record(const std::string& line);

}  // namespace patchlab::policy

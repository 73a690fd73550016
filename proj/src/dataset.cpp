#include "patchlab/dataset.hpp"

#include <cstdio>
#include <fstream>
#include <sstream>

namespace patchlab::policy {

namespace {

std::string fmt_double(double v) {
    char buf[40];
    std::snprintf(buf, sizeof(buf), "%.17g", v);
    return buf;
}

std::vector<std::string> split(const std::string& s, char delim) {
    std::vector<std::string> out;
    std::string cur;
    for (const char c : s) {
        if (c == delim) {
            out.push_back(cur);
            cur.clear();
        } else {
            cur += c;
        }
    }
    out.push_back(cur);
    return out;
}

std::string expect_field(const std::vector<std::string>& fields, std::size_t i,
                         const std::string& tag) {
    if (i >= fields.size()) throw FormatError("record missing field " + tag);
    const std::string& f = fields[i];
    if (f.rfind(tag + ":", 0) != 0) {
        throw FormatError("record field " + std::to_string(i) + " is not " + tag + ": " + f);
    }
    return f.substr(tag.size() + 1);
}

std::vector<int> parse_ints(const std::string& s) {
    std::vector<int> out;
    if (s.empty()) return out;
    for (const std::string& part : split(s, ',')) out.push_back(std::stoi(part));
    return out;
}

}  // namespace

std::string encode_record(const DatasetRecord& rec) {
    std::ostringstream os;
    os << "task:" << rec.task_id << " seed:" << rec.layout_seed << " step:" << rec.step;
    os << " instr:";
    for (int i = 0; i < rec.instr.length; ++i) {
        if (i) os << ',';
        os << rec.instr.tokens[static_cast<std::size_t>(i)];
    }
    os << " cot:";
    for (std::size_t i = 0; i < rec.cot.tokens.size(); ++i) {
        if (i) os << ',';
        os << rec.cot.tokens[i];
    }
    os << " act:";
    if (rec.action_kind == Action::Kind::Discrete) {
        os << "d:" << rec.disc_token;
    } else {
        os << "c:";
        for (std::size_t k = 0; k < rec.chunk.size(); ++k) {
            if (k) os << ';';
            os << fmt_double(rec.chunk[k][0]) << ',' << fmt_double(rec.chunk[k][1]) << ','
               << fmt_double(rec.chunk[k][2]);
        }
    }
    os << " succ:" << (rec.success ? 1 : 0);
    os << " obs:" << (rec.obs_ref.empty() ? "-" : rec.obs_ref);
    return os.str();
}

DatasetRecord decode_record(const std::string& line) {
    const std::vector<std::string> fields = split(line, ' ');
    DatasetRecord rec;
    rec.task_id = expect_field(fields, 0, "task");
    rec.layout_seed = std::stoull(expect_field(fields, 1, "seed"));
    rec.step = std::stoi(expect_field(fields, 2, "step"));
    rec.instr = Instruction::of(parse_ints(expect_field(fields, 3, "instr")));
    rec.cot.tokens = parse_ints(expect_field(fields, 4, "cot"));
    const std::string act = expect_field(fields, 5, "act");
    if (act.rfind("d:", 0) == 0) {
        rec.action_kind = Action::Kind::Discrete;
        rec.disc_token = std::stoi(act.substr(2));
    } else if (act.rfind("c:", 0) == 0) {
        rec.action_kind = Action::Kind::Continuous;
        for (const std::string& part : split(act.substr(2), ';')) {
            const std::vector<std::string> nums = split(part, ',');
            if (nums.size() != 3) throw FormatError("bad chunk entry: " + part);
            rec.chunk.push_back({std::stod(nums[0]), std::stod(nums[1]), std::stod(nums[2])});
        }
    } else {
        throw FormatError("bad action encoding: " + act);
    }
    rec.success = expect_field(fields, 6, "succ") == "1";
    rec.obs_ref = expect_field(fields, 7, "obs");
    return rec;
}

void write_dataset(const std::vector<DatasetRecord>& records, const std::filesystem::path& path) {
    std::ofstream out(path);
    if (!out) throw FormatError("cannot open for writing: " + path.string());
    for (const auto& rec : records) out << encode_record(rec) << '\n';
    if (!out) throw FormatError("write failed: " + path.string());
}

std::vector<DatasetRecord> read_dataset(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw FormatError("cannot open: " + path.string());
    std::vector<DatasetRecord> out;
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        if (line.empty()) continue;
        try {
            out.push_back(decode_record(line));
        } catch (const std::exception& e) {
            throw FormatError(path.string() + ":" + std::to_string(lineno) + ": " + e.what());
        }
    }
    return out;
}

}  // namespace patchlab::policy

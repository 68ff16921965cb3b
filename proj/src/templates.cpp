#include "ttc/templates.hpp"

#include <stdexcept>

#include "ttc/templates_generated.hpp"

namespace ttc {

std::string PromptTemplate::render(const std::map<std::string, std::string>& values) const {
    std::string out;
    out.reserve(body.size());
    std::size_t i = 0;
    while (i < body.size()) {
        if (body[i] == '{') {
            const auto close = body.find('}', i + 1);
            if (close != std::string::npos) {
                const auto it = values.find(body.substr(i + 1, close - i - 1));
                if (it != values.end()) {
                    out += it->second;
                    i = close + 1;
                    continue;
                }
            }
        }
        out += body[i++];
    }
    return out;
}

PromptTemplate parse_template(std::string_view file_contents) {
    constexpr std::string_view kMagic = "#! ttc-template ";
    if (file_contents.substr(0, kMagic.size()) != kMagic) throw std::invalid_argument("template lacks header line");
    const auto eol = file_contents.find('\n');
    if (eol == std::string_view::npos) throw std::invalid_argument("template has no body");
    const std::string_view header = file_contents.substr(kMagic.size(), eol - kMagic.size());
    const auto space = header.find(' ');
    if (space == std::string_view::npos || header.size() < space + 3 || header[space + 1] != 'v') {
        throw std::invalid_argument("malformed template header");
    }
    PromptTemplate t;
    t.name = std::string(header.substr(0, space));
    t.version = std::stoi(std::string(header.substr(space + 2)));
    t.body = std::string(file_contents.substr(eol + 1));
    if (!t.body.empty() && t.body.back() == '\n') t.body.pop_back();
    return t;
}

const PromptTemplate& builtin_template(std::string_view name) {
    static const PromptTemplate kExtract = parse_template(templates_embedded::extract);
    static const PromptTemplate kRefine = parse_template(templates_embedded::refine);
    static const PromptTemplate kCombine = parse_template(templates_embedded::combine);
    static const PromptTemplate kJudgeSemantic = parse_template(templates_embedded::judge_semantic);
    static const PromptTemplate kJudgeF1 = parse_template(templates_embedded::judge_f1);
    for (const PromptTemplate* t : {&kExtract, &kRefine, &kCombine, &kJudgeSemantic, &kJudgeF1}) {
        if (t->name == name) return *t;
    }
    throw std::invalid_argument("unknown prompt template '" + std::string(name) + "'");
}

}  // namespace ttc

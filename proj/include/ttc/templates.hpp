#pragma once

#include <map>
#include <string>
#include <string_view>

namespace ttc {

/// A versioned prompt template. Files start with a header line
/// "#! ttc-template <name> v<version>" followed by the body.
struct PromptTemplate {
    std::string name;
    int version = 0;
    std::string body;

    /// Replaces `{key}` for every key in `values` in a single pass; inserted
    /// text is never rescanned, unknown braces are left untouched.
    std::string render(const std::map<std::string, std::string>& values) const;
};

PromptTemplate parse_template(std::string_view file_contents);
/// Built-in templates: extract, refine, combine, judge_semantic, judge_f1.
const PromptTemplate& builtin_template(std::string_view name);

}  // namespace ttc

#include "forge15/minicalc.hpp"

#include <cctype>
#include <map>
#include <memory>
#include <stdexcept>
#include <utility>

namespace forge15 {
namespace {

constexpr int kStepBudget = 10000;
constexpr int kMaxCallDepth = 256;
constexpr int kMaxParseDepth = 200;

struct MinicalcError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// ---------------------------------------------------------------- lexer

struct Token {
    enum Kind { Int, Ident, Keyword, Punct, End } kind = End;
    std::string text;
    uint64_t magnitude = 0;  // Int only, sign applied by the parser
};

bool is_keyword(const std::string& s) {
    return s == "fn" || s == "if" || s == "then" || s == "else";
}

std::vector<Token> lex(const std::string& src) {
    std::vector<Token> out;
    size_t i = 0;
    const size_t n = src.size();
    while (i < n) {
        const unsigned char c = static_cast<unsigned char>(src[i]);
        if (std::isspace(c)) {
            ++i;
            continue;
        }
        if (std::isdigit(c)) {
            uint64_t v = 0;
            while (i < n && std::isdigit(static_cast<unsigned char>(src[i]))) {
                const uint64_t digit = static_cast<uint64_t>(src[i] - '0');
                if (v > (UINT64_MAX - digit) / 10) {
                    throw MinicalcError("parse error: integer literal out of range");
                }
                v = v * 10 + digit;
                ++i;
            }
            out.push_back({Token::Int, "", v});
            continue;
        }
        if (std::isalpha(c) || c == '_') {
            size_t j = i;
            while (j < n && (std::isalnum(static_cast<unsigned char>(src[j])) || src[j] == '_')) ++j;
            std::string word = src.substr(i, j - i);
            out.push_back({is_keyword(word) ? Token::Keyword : Token::Ident, std::move(word), 0});
            i = j;
            continue;
        }
        auto two = [&](char a, char b) { return src[i] == a && i + 1 < n && src[i + 1] == b; };
        if (two('<', '=') || two('>', '=') || two('=', '=') || two('!', '=')) {
            out.push_back({Token::Punct, src.substr(i, 2), 0});
            i += 2;
            continue;
        }
        if (std::string("+-*/%<>=(),").find(src[i]) != std::string::npos) {
            out.push_back({Token::Punct, std::string(1, src[i]), 0});
            ++i;
            continue;
        }
        throw MinicalcError(std::string("parse error: unexpected character '") + src[i] + "'");
    }
    out.push_back({Token::End, "", 0});
    return out;
}

// ---------------------------------------------------------------- ast

struct Expr {
    enum Kind { Lit, Var, Bin, If, Call } kind = Lit;
    int64_t value = 0;       // Lit
    std::string name;        // Var/Call name, Bin operator
    std::vector<Expr> kids;  // Bin lhs,rhs; If cond,then,else; Call args
};

struct FnDef {
    std::string name;
    std::vector<std::string> params;
    Expr body;
};

struct ProgramAst {
    std::vector<FnDef> fns;
    std::map<std::string, size_t> index;
};

// ---------------------------------------------------------------- parser

struct Parser {
    const std::vector<Token>& toks;
    size_t pos = 0;

    const Token& peek() const { return toks[pos]; }

    bool at_punct(const char* p) const {
        return peek().kind == Token::Punct && peek().text == p;
    }
    bool at_keyword(const char* k) const {
        return peek().kind == Token::Keyword && peek().text == k;
    }

    void expect_punct(const char* p) {
        if (!at_punct(p)) throw MinicalcError(std::string("parse error: expected '") + p + "'");
        ++pos;
    }
    void expect_keyword(const char* k) {
        if (!at_keyword(k)) throw MinicalcError(std::string("parse error: expected '") + k + "'");
        ++pos;
    }
    std::string expect_ident() {
        if (peek().kind != Token::Ident) throw MinicalcError("parse error: expected identifier");
        return toks[pos++].text;
    }

    Expr literal(uint64_t magnitude, bool negative) {
        const uint64_t limit = negative ? (1ull << 63) : (1ull << 63) - 1;
        if (magnitude > limit) throw MinicalcError("parse error: integer literal out of range");
        Expr e;
        e.kind = Expr::Lit;
        e.value = negative ? static_cast<int64_t>(-magnitude) : static_cast<int64_t>(magnitude);
        return e;
    }

    Expr parse_expr(int depth) {  // comparison level, loosest
        if (depth > kMaxParseDepth) throw MinicalcError("parse error: expression too deep");
        Expr lhs = parse_additive(depth + 1);
        while (at_punct("<") || at_punct("<=") || at_punct(">") || at_punct(">=") ||
               at_punct("==") || at_punct("!=")) {
            std::string op = toks[pos++].text;
            Expr rhs = parse_additive(depth + 1);
            Expr bin;
            bin.kind = Expr::Bin;
            bin.name = std::move(op);
            bin.kids.push_back(std::move(lhs));
            bin.kids.push_back(std::move(rhs));
            lhs = std::move(bin);
        }
        return lhs;
    }

    Expr parse_additive(int depth) {
        if (depth > kMaxParseDepth) throw MinicalcError("parse error: expression too deep");
        Expr lhs = parse_multiplicative(depth + 1);
        while (at_punct("+") || at_punct("-")) {
            std::string op = toks[pos++].text;
            Expr rhs = parse_multiplicative(depth + 1);
            Expr bin;
            bin.kind = Expr::Bin;
            bin.name = std::move(op);
            bin.kids.push_back(std::move(lhs));
            bin.kids.push_back(std::move(rhs));
            lhs = std::move(bin);
        }
        return lhs;
    }

    Expr parse_multiplicative(int depth) {
        if (depth > kMaxParseDepth) throw MinicalcError("parse error: expression too deep");
        Expr lhs = parse_primary(depth + 1);
        while (at_punct("*") || at_punct("/") || at_punct("%")) {
            std::string op = toks[pos++].text;
            Expr rhs = parse_primary(depth + 1);
            Expr bin;
            bin.kind = Expr::Bin;
            bin.name = std::move(op);
            bin.kids.push_back(std::move(lhs));
            bin.kids.push_back(std::move(rhs));
            lhs = std::move(bin);
        }
        return lhs;
    }

    Expr parse_primary(int depth) {
        if (depth > kMaxParseDepth) throw MinicalcError("parse error: expression too deep");
        if (peek().kind == Token::Int) {
            return literal(toks[pos++].magnitude, false);
        }
        if (at_punct("-") && toks[pos + 1].kind == Token::Int) {
            pos += 2;
            return literal(toks[pos - 1].magnitude, true);
        }
        if (at_punct("(")) {
            ++pos;
            Expr e = parse_expr(depth + 1);
            expect_punct(")");
            return e;
        }
        if (at_keyword("if")) {
            ++pos;
            Expr e;
            e.kind = Expr::If;
            e.kids.push_back(parse_expr(depth + 1));
            expect_keyword("then");
            e.kids.push_back(parse_expr(depth + 1));
            expect_keyword("else");
            e.kids.push_back(parse_expr(depth + 1));
            return e;
        }
        if (peek().kind == Token::Ident) {
            std::string name = toks[pos++].text;
            if (!at_punct("(")) {
                Expr e;
                e.kind = Expr::Var;
                e.name = std::move(name);
                return e;
            }
            ++pos;
            Expr e;
            e.kind = Expr::Call;
            e.name = std::move(name);
            if (!at_punct(")")) {
                e.kids.push_back(parse_expr(depth + 1));
                while (at_punct(",")) {
                    ++pos;
                    e.kids.push_back(parse_expr(depth + 1));
                }
            }
            expect_punct(")");
            return e;
        }
        throw MinicalcError("parse error: unexpected token");
    }

    ProgramAst parse_program() {
        ProgramAst prog;
        do {
            expect_keyword("fn");
            FnDef fn;
            fn.name = expect_ident();
            expect_punct("(");
            if (!at_punct(")")) {
                fn.params.push_back(expect_ident());
                while (at_punct(",")) {
                    ++pos;
                    fn.params.push_back(expect_ident());
                }
            }
            expect_punct(")");
            expect_punct("=");
            fn.body = parse_expr(0);
            for (size_t i = 0; i + 1 < fn.params.size(); ++i) {
                for (size_t j = i + 1; j < fn.params.size(); ++j) {
                    if (fn.params[i] == fn.params[j]) {
                        throw MinicalcError("parse error: duplicate parameter '" + fn.params[i] + "'");
                    }
                }
            }
            if (prog.index.count(fn.name)) {
                throw MinicalcError("parse error: duplicate function '" + fn.name + "'");
            }
            prog.index[fn.name] = prog.fns.size();
            prog.fns.push_back(std::move(fn));
        } while (peek().kind != Token::End);
        return prog;
    }
};

// ---------------------------------------------------------------- eval

int64_t apply_op(const std::string& op, int64_t a, int64_t b) {
    int64_t r = 0;
    if (op == "+") {
        if (__builtin_add_overflow(a, b, &r)) throw MinicalcError("overflow");
        return r;
    }
    if (op == "-") {
        if (__builtin_sub_overflow(a, b, &r)) throw MinicalcError("overflow");
        return r;
    }
    if (op == "*") {
        if (__builtin_mul_overflow(a, b, &r)) throw MinicalcError("overflow");
        return r;
    }
    if (op == "/") {
        if (b == 0) throw MinicalcError("division by zero");
        if (a == INT64_MIN && b == -1) throw MinicalcError("overflow");
        return a / b;
    }
    if (op == "%") {
        if (b == 0) throw MinicalcError("division by zero");
        if (b == -1) return 0;  // INT64_MIN % -1 traps in hardware; the value is 0
        return a % b;
    }
    if (op == "<") return a < b ? 1 : 0;
    if (op == "<=") return a <= b ? 1 : 0;
    if (op == ">") return a > b ? 1 : 0;
    if (op == ">=") return a >= b ? 1 : 0;
    if (op == "==") return a == b ? 1 : 0;
    return a != b ? 1 : 0;  // "!="
}

using Env = std::shared_ptr<const std::vector<std::pair<std::string, int64_t>>>;

struct EvalTask {
    enum Kind { Eval, ApplyBin, Branch, PerformCall, Return } kind = Eval;
    const Expr* expr = nullptr;  // Eval
    Env env;                     // Eval, Branch
    std::string name;            // ApplyBin operator, PerformCall callee
    const Expr* then_e = nullptr;
    const Expr* else_e = nullptr;
    size_t argc = 0;  // PerformCall
};

int64_t evaluate(const ProgramAst& prog, const std::string& entry,
                 const std::vector<int64_t>& args) {
    auto entry_it = prog.index.find(entry);
    if (entry_it == prog.index.end()) {
        throw MinicalcError("unknown function '" + entry + "'");
    }
    const FnDef& entry_fn = prog.fns[entry_it->second];
    if (entry_fn.params.size() != args.size()) {
        throw MinicalcError("arity mismatch for '" + entry + "'");
    }
    auto env0 = std::make_shared<std::vector<std::pair<std::string, int64_t>>>();
    for (size_t i = 0; i < args.size(); ++i) env0->emplace_back(entry_fn.params[i], args[i]);

    std::vector<EvalTask> tasks;
    std::vector<int64_t> values;
    int depth = 1;
    int steps = 0;
    tasks.push_back({EvalTask::Eval, &entry_fn.body, env0, "", nullptr, nullptr, 0});

    while (!tasks.empty()) {
        if (++steps > kStepBudget) throw MinicalcError("step budget exhausted");
        EvalTask t = std::move(tasks.back());
        tasks.pop_back();
        switch (t.kind) {
            case EvalTask::Eval: {
                const Expr& e = *t.expr;
                switch (e.kind) {
                    case Expr::Lit:
                        values.push_back(e.value);
                        break;
                    case Expr::Var: {
                        bool found = false;
                        for (const auto& [name, value] : *t.env) {
                            if (name == e.name) {
                                values.push_back(value);
                                found = true;
                                break;
                            }
                        }
                        if (!found) throw MinicalcError("unknown variable '" + e.name + "'");
                        break;
                    }
                    case Expr::Bin:
                        tasks.push_back({EvalTask::ApplyBin, nullptr, nullptr, e.name, nullptr, nullptr, 0});
                        tasks.push_back({EvalTask::Eval, &e.kids[1], t.env, "", nullptr, nullptr, 0});
                        tasks.push_back({EvalTask::Eval, &e.kids[0], t.env, "", nullptr, nullptr, 0});
                        break;
                    case Expr::If:
                        tasks.push_back({EvalTask::Branch, nullptr, t.env, "", &e.kids[1], &e.kids[2], 0});
                        tasks.push_back({EvalTask::Eval, &e.kids[0], t.env, "", nullptr, nullptr, 0});
                        break;
                    case Expr::Call:
                        tasks.push_back({EvalTask::PerformCall, nullptr, nullptr, e.name, nullptr, nullptr,
                                         e.kids.size()});
                        for (size_t i = e.kids.size(); i-- > 0;) {
                            tasks.push_back({EvalTask::Eval, &e.kids[i], t.env, "", nullptr, nullptr, 0});
                        }
                        break;
                }
                break;
            }
            case EvalTask::ApplyBin: {
                const int64_t rhs = values.back();
                values.pop_back();
                const int64_t lhs = values.back();
                values.pop_back();
                values.push_back(apply_op(t.name, lhs, rhs));
                break;
            }
            case EvalTask::Branch: {
                const int64_t cond = values.back();
                values.pop_back();
                tasks.push_back({EvalTask::Eval, cond != 0 ? t.then_e : t.else_e, t.env, "", nullptr,
                                 nullptr, 0});
                break;
            }
            case EvalTask::PerformCall: {
                auto it = prog.index.find(t.name);
                if (it == prog.index.end()) {
                    throw MinicalcError("unknown function '" + t.name + "'");
                }
                const FnDef& fn = prog.fns[it->second];
                if (fn.params.size() != t.argc) {
                    throw MinicalcError("arity mismatch for '" + t.name + "'");
                }
                auto env = std::make_shared<std::vector<std::pair<std::string, int64_t>>>(t.argc);
                for (size_t i = t.argc; i-- > 0;) {
                    (*env)[i] = {fn.params[i], values.back()};
                    values.pop_back();
                }
                // A call with nothing pending after it is a tail call: the
                // existing return marker (or the top level) absorbs it.
                const bool tail = tasks.empty() || tasks.back().kind == EvalTask::Return;
                if (!tail) {
                    if (++depth > kMaxCallDepth) throw MinicalcError("call depth exceeded");
                    tasks.push_back({EvalTask::Return, nullptr, nullptr, "", nullptr, nullptr, 0});
                }
                tasks.push_back({EvalTask::Eval, &fn.body, env, "", nullptr, nullptr, 0});
                break;
            }
            case EvalTask::Return:
                --depth;
                break;
        }
    }
    return values.back();
}

}  // namespace

MinicalcResult run_minicalc(const std::string& program, const CodeTest& test) {
    try {
        const std::vector<Token> tokens = lex(program);
        Parser parser{tokens};
        const ProgramAst ast = parser.parse_program();
        const int64_t result = evaluate(ast, test.call, test.args);
        if (result == test.expect) return {true, ""};
        return {false, "value mismatch"};
    } catch (const MinicalcError& e) {
        return {false, e.what()};
    }
}

}  // namespace forge15

#pragma once

#include <algorithm>
#include <cstdint>
#include <string>
#include <vector>

#include "clear/common.hpp"
#include "clear/corpus.hpp"

namespace clear {

namespace synth_detail {

inline const std::vector<std::string>& balance_names() {
  static const std::vector<std::string> v = {"balances", "funds", "deposits", "holdings"};
  return v;
}
inline const std::vector<std::string>& lock_names() {
  static const std::vector<std::string> v = {"locked", "frozen", "halted", "guarded"};
  return v;
}
inline const std::vector<std::string>& counter_names() {
  static const std::vector<std::string> v = {"counter", "total", "nonce", "score", "tally"};
  return v;
}
inline const std::vector<std::string>& amount_names() {
  static const std::vector<std::string> v = {"amount", "payout", "request", "debit"};
  return v;
}
inline const std::vector<std::string>& filler_fn_names() {
  static const std::vector<std::string> v = {"update", "refresh", "bump",  "tick",
                                             "adjust", "mix",     "step_", "blend",
                                             "poke",   "touch",   "cycle", "shift_"};
  return v;
}
inline const std::vector<std::string>& withdraw_fn_names() {
  static const std::vector<std::string> v = {"withdrawFunds", "takeOut",   "redeem",
                                             "claimFunds",    "pullFunds", "cashOut"};
  return v;
}
inline const std::vector<std::string>& filler_arg_names() {
  static const std::vector<std::string> v = {"x", "y", "z", "w", "input_", "delta"};
  return v;
}
inline const std::vector<std::string>& contract_base_names() {
  static const std::vector<std::string> v = {"Wallet", "Vault", "Bank",  "Token", "Escrow",
                                             "Fund",   "Pool",  "Ledger", "Safe_", "Store"};
  return v;
}

template <typename Pool>
const std::string& pick(Rng& rng, const Pool& pool) {
  return pool[static_cast<size_t>(rng.below(pool.size()))];
}

inline std::string lit(Rng& rng) { return std::to_string(1 + rng.below(97)); }

struct ContractPlan {
  std::string contract_name;
  std::string bal, lock, ctr, amt, wd_name;
  std::vector<std::string> decls;
  // each function is a name + list of statement lines; the withdraw slot is
  // marked by an empty name
  struct Fn {
    std::string name;
    std::string arg;
    std::vector<std::string> stmts;
  };
  std::vector<Fn> fns;
  std::size_t withdraw_slot = 0;
};

inline std::string filler_statement(Rng& rng, const ContractPlan& p, const std::string& arg) {
  switch (rng.below(6)) {
    case 0: return p.ctr + " = " + p.ctr + " + " + lit(rng) + ";";
    case 1: return p.ctr + " = " + p.ctr + " * " + lit(rng) + " + " + arg + ";";
    case 2: return "require(" + arg + " >= " + lit(rng) + ");";
    case 3: return "if (" + arg + " > " + lit(rng) + ") { " + p.ctr + " = " + p.ctr + " - " +
                   lit(rng) + "; }";
    case 4: return p.bal + "[msg.sender] = " + p.bal + "[msg.sender] + " + arg + ";";
    default: return p.ctr + " = " + p.ctr + " ^ " + lit(rng) + ";";
  }
}

// All randomness is drawn here, independent of the vulnerability label, so
// the two variants of an instance differ only in critical-statement order.
inline ContractPlan plan_contract(std::uint64_t seed, int index) {
  Rng rng = Rng::derive(seed, "synth-contract", static_cast<std::uint64_t>(index));
  ContractPlan p;
  p.contract_name = pick(rng, contract_base_names()) + std::to_string(rng.below(10));
  p.bal = pick(rng, balance_names());
  p.lock = pick(rng, lock_names());
  p.ctr = pick(rng, counter_names());
  p.amt = pick(rng, amount_names());
  p.wd_name = pick(rng, withdraw_fn_names());

  // The withdraw slot is drawn first, uniform over depth 0..2, and the
  // filler count grows to match; late placements are as common as early
  // ones, so absolute position carries no label signal.
  p.withdraw_slot = static_cast<std::size_t>(rng.below(3));
  const std::uint64_t n_fillers =
      std::max<std::uint64_t>(p.withdraw_slot, rng.below(3));
  for (std::uint64_t f = 0; f < n_fillers; ++f) {
    ContractPlan::Fn fn;
    fn.name = pick(rng, filler_fn_names());
    fn.arg = pick(rng, filler_arg_names());
    const std::uint64_t n_stmts = 2 + rng.below(2);  // 2..3
    for (std::uint64_t s = 0; s < n_stmts; ++s)
      fn.stmts.push_back(filler_statement(rng, p, fn.arg));
    p.fns.push_back(std::move(fn));
  }
  return p;
}

inline void emit_function(std::string& out, const std::string& name, const std::string& arg,
                          const std::vector<std::string>& stmts) {
  out += "    function " + name + "(uint256 " + arg + ") public {\n";
  for (const auto& s : stmts) out += "        " + s + "\n";
  out += "    }\n";
}

}  // namespace synth_detail

// Render one synthetic contract instance. The structure is a pure function
// of (seed, index); `vulnerable` only swaps the order of the critical
// statements inside the withdraw-style function, mirroring the
// transfer-before-lock fault pattern.
inline std::string render_synthetic_contract(std::uint64_t seed, int index, bool vulnerable) {
  using namespace synth_detail;
  ContractPlan p = plan_contract(seed, index);

  const std::string lock_stmt = p.lock + "[msg.sender] = true;";
  const std::string update_stmt =
      p.bal + "[msg.sender] = " + p.bal + "[msg.sender] - " + p.amt + ";";
  const std::string transfer_stmt = "msg.sender.call{value: " + p.amt + "}(\"\");";

  std::vector<std::string> critical;
  if (vulnerable)
    critical = {transfer_stmt, update_stmt, lock_stmt};
  else
    critical = {lock_stmt, update_stmt, transfer_stmt};

  std::vector<std::string> wd_stmts;
  wd_stmts.push_back("require(" + p.bal + "[msg.sender] >= " + p.amt + ");");
  wd_stmts.push_back("require(!" + p.lock + "[msg.sender]);");
  for (auto& s : critical) wd_stmts.push_back(s);

  std::string out;
  out += "pragma solidity ^0.8.0;\n";
  out += "contract " + p.contract_name + " {\n";
  out += "    mapping(address => uint256) " + p.bal + ";\n";
  out += "    mapping(address => bool) " + p.lock + ";\n";
  out += "    uint256 " + p.ctr + ";\n";
  for (std::size_t slot = 0; slot <= p.fns.size(); ++slot) {
    if (slot == p.withdraw_slot) emit_function(out, p.wd_name, p.amt, wd_stmts);
    if (slot < p.fns.size())
      emit_function(out, p.fns[slot].name, p.fns[slot].arg, p.fns[slot].stmts);
  }
  out += "}\n";
  return out;
}

// Deterministic corpus of withdraw-pattern contracts labeled with the
// statement-order task. Exactly round(n * vuln_fraction) contracts carry
// label 1, assigned by a seeded permutation.
inline std::vector<LabeledExample> generate_synthetic_corpus(int n, double vuln_fraction,
                                                             std::uint64_t seed) {
  if (n < 10) throw ValidationError("synthetic corpus: n must be >= 10");
  if (!(vuln_fraction > 0.0 && vuln_fraction < 1.0))
    throw ValidationError("synthetic corpus: vuln_fraction must be in (0,1)");
  const int n_vuln = static_cast<int>(std::llround(static_cast<double>(n) * vuln_fraction));
  std::vector<int> order(static_cast<size_t>(n));
  for (int i = 0; i < n; ++i) order[static_cast<size_t>(i)] = i;
  Rng label_rng = Rng::derive(seed, "synth-labels");
  label_rng.shuffle(order);
  std::vector<int> labels(static_cast<size_t>(n), 0);
  for (int i = 0; i < n_vuln; ++i) labels[static_cast<size_t>(order[static_cast<size_t>(i)])] = 1;

  std::vector<LabeledExample> corpus;
  corpus.reserve(static_cast<size_t>(n));
  for (int i = 0; i < n; ++i) {
    LabeledExample ex;
    char buf[32];
    std::snprintf(buf, sizeof(buf), "synth-%06d", i);
    ex.id = buf;
    ex.source = render_synthetic_contract(seed, i, labels[static_cast<size_t>(i)] == 1);
    ex.labels["ORDER"] = labels[static_cast<size_t>(i)];
    corpus.push_back(std::move(ex));
  }
  return corpus;
}

}  // namespace clear

"""Inference rules: pinned input/output examples for every operation."""

import pytest

from bitline.ir import (
    CST, URA, WRA, SID, SDD,
    Assign, BinOp, Load, MemRef, RefinedBit, SecurityType, Seq, Store,
    TypeEnv, TypedBitvector, Var, VecConst, annotate, mk_constant,
)
from bitline.rules import (
    AnalysisError, eval_expr, exec_stmt, format_rules,
    infer_arith, infer_bit_logic, infer_bit_xor, infer_comp, infer_concat,
    infer_cond, infer_extract, infer_logic_vec, infer_neg, infer_not_vec,
    infer_shift,
)


def filled(level, width=32):
    return TypedBitvector.filled(level, width)


def from_pattern(*runs):
    """Build a vector from (level-or-bit, count) runs given MSB first."""
    bits = []
    for spec, count in reversed(runs):
        if isinstance(spec, SecurityType):
            bits.extend([RefinedBit(spec)] * count)
        else:
            bits.extend([RefinedBit(CST, spec)] * count)
    return TypedBitvector.from_bits(bits)


# -- single-bit rules --------------------------------------------------------

def test_bit_and_with_constant_zero_clears():
    out = infer_bit_logic("&", RefinedBit(SDD), RefinedBit(CST, 0))
    assert out == RefinedBit(CST, 0)


def test_bit_and_of_two_uniform_bits_demotes():
    assert infer_bit_logic("&", RefinedBit(URA), RefinedBit(URA)) == RefinedBit(WRA)
    assert infer_bit_logic("|", RefinedBit(URA), RefinedBit(URA)) == RefinedBit(WRA)


def test_bit_or_joins_levels():
    assert infer_bit_logic("|", RefinedBit(SID), RefinedBit(SDD)) == RefinedBit(SDD)


def test_bit_and_with_constant_one_passes_through():
    assert infer_bit_logic("&", RefinedBit(SDD), RefinedBit(CST, 1)) == RefinedBit(SDD)
    assert infer_bit_logic("&", RefinedBit(CST, 1), RefinedBit(CST, 1)) == RefinedBit(CST, 1)


def test_bit_xor_blinds_with_uniform_operand():
    assert infer_bit_xor(RefinedBit(SDD), RefinedBit(URA)) == RefinedBit(URA)


def test_bit_xor_folds_constants():
    assert infer_bit_xor(RefinedBit(CST, 1), RefinedBit(CST, 1)) == RefinedBit(CST, 0)
    assert infer_bit_xor(RefinedBit(CST, 1), RefinedBit(CST, 0)) == RefinedBit(CST, 1)


def test_bit_xor_joins_otherwise():
    assert infer_bit_xor(RefinedBit(SID), RefinedBit(SDD)) == RefinedBit(SDD)


def test_bit_xor_same_constant_operand_is_zero():
    assert infer_bit_xor(RefinedBit(CST), RefinedBit(CST), same_operand=True) \
        == RefinedBit(CST, 0)


def test_neg_keeps_level_and_flips_value():
    assert infer_neg(RefinedBit(SDD)) == RefinedBit(SDD)
    assert infer_neg(RefinedBit(CST, 0)) == RefinedBit(CST, 1)
    assert infer_neg(RefinedBit(CST, 1)) == RefinedBit(CST, 0)


# -- concat / extract / shift ------------------------------------------------

def test_concat_uniform_with_secret_free():
    out = infer_concat(filled(URA, 16), filled(SID, 16))
    assert out.vector_type() is URA and out.width == 32


def test_concat_uniform_with_secret():
    out = infer_concat(filled(URA, 16), filled(SDD, 16))
    assert out.vector_type() is SDD


def test_concat_preserves_constant_predicates():
    out = infer_concat(mk_constant(0xAB, 8), mk_constant(0xCD, 8))
    assert out.known_value() == 0xABCD and out.vector_type() is CST


def test_extract_copies_bits_verbatim():
    assert infer_extract(24, 31, filled(SDD)).display() == "{K}8:SDD"
    v = from_pattern((URA, 16), (SID, 16))
    assert infer_extract(16, 31, v).display() == "{U}16:URA"
    lsb = infer_extract(0, 0, mk_constant(0x5, 4))
    assert lsb.width == 1 and lsb.known_value() == 1


def test_extract_bounds_checked():
    with pytest.raises(AnalysisError):
        infer_extract(8, 40, filled(SID))


def test_shift_right_logical_zero_fills():
    rules = []
    out = infer_shift(filled(SDD), 24, "shr", rules)
    assert out.display() == "{0}24{K}8:SDD"
    assert format_rules(rules) == "Extraction, Concat.I"


def test_shift_left_folds_constants():
    assert infer_shift(mk_constant(1, 32), 6, "shl").known_value() == 0x40


def test_shift_right_arithmetic_replicates_sign():
    v = from_pattern((SDD, 1), (SID, 31))
    out = infer_shift(v, 1, "sar")
    assert out.bit(31).sec is SDD and out.bit(30).sec is SDD
    assert out.bit(29).sec is SID


def test_concat_extract_roundtrip():
    hi = from_pattern((SDD, 4), (1, 4))
    lo = mk_constant(0x5A, 8)
    joined = infer_concat(hi, lo)
    assert infer_extract(0, 7, joined) == lo
    assert infer_extract(8, 15, joined) == hi


# -- vector logic --------------------------------------------------------------

def test_mask_keeps_selected_secret_bits():
    rules = []
    out = infer_logic_vec("&", filled(SDD), mk_constant(0xFFFF0000, 32), rules=rules)
    assert out.display() == "{K}16{0}16:SDD"
    assert format_rules(rules) == "Logic.I, Conj&Disj.I, Const-Conj.I&II"


def test_xor_with_fresh_randomness_blinds_vector():
    out = infer_logic_vec("^", filled(SDD), filled(URA))
    assert out.display() == "{U}32:URA"


def test_and_with_itself_keeps_constants():
    v = mk_constant(0x1234, 32)
    assert infer_logic_vec("&", v, v, same_operand=True) == v


def test_or_constant_refinements():
    rules = []
    out = infer_logic_vec("|", filled(SDD), mk_constant(0xFF, 32), rules=rules)
    assert out.display() == "{K}24{1}8:SDD"
    assert "Const-Disj.I" in rules and "Const-Disj.II" in rules


def test_not_vector_flips_known_bits():
    out = infer_not_vec(mk_constant(0x0F, 8))
    assert out.known_value() == 0xF0
    assert infer_not_vec(filled(SDD)).display() == "{K}32:SDD"


# -- arithmetic ----------------------------------------------------------------

def test_add_keeps_statically_pinned_high_bits():
    # the worked example: a masked secret byte plus a table base address
    byte = from_pattern((0, 24), (SDD, 8))
    rules = []
    out = infer_arith("+", byte, mk_constant(0x8110460, 32), rules=rules)
    assert format_rules(rules) == "Arith.I, Concat.I"
    assert out.vector_type() is SDD
    # sum ranges over [0x8110460, 0x811055f]: bits 9.. are pinned
    for i in range(9, 32):
        expect = (0x8110460 >> i) & 1
        assert out.bit(i) == RefinedBit(CST, expect)
    for i in range(9):
        assert out.bit(i).sec is SDD


def test_arith_uniform_operand_absorbs_public():
    assert infer_arith("+", filled(URA), filled(SID)).display() == "{U}32:URA"


def test_arith_uniform_with_secret_is_secret():
    assert infer_arith("+", filled(URA), filled(SDD)).display() == "{K}32:SDD"


def test_arith_constant_folding():
    assert infer_arith("*", mk_constant(3, 32), mk_constant(5, 32)).known_value() == 15
    assert infer_arith("-", mk_constant(3, 8), mk_constant(5, 8)).known_value() == 0xFE
    assert infer_arith("/", mk_constant(7, 8), mk_constant(2, 8)).known_value() == 3


def test_divide_by_constant_zero_is_diagnosed():
    diags = []
    out = infer_arith("/", filled(SID), mk_constant(0, 32), diagnostics=diags)
    assert diags and out.vector_type() is SID


# -- comparison ----------------------------------------------------------------

def test_comparison_forced_by_intervals():
    masked = infer_logic_vec("&", filled(SDD), mk_constant(0x7, 32))
    out = infer_comp(">", masked, mk_constant(40, 32))
    assert out == mk_constant(0, 1)  # can never exceed 7


def test_comparison_of_masked_secret_with_zero_stays_secret():
    v = from_pattern((SDD, 16), (0, 16))
    out = infer_comp("==", v, mk_constant(0, 32))
    assert out.display() == "{K}:SDD"


def test_comparison_folds_constants():
    assert infer_comp("==", mk_constant(5, 32), mk_constant(5, 32)) == mk_constant(1, 1)


def test_signed_comparison_uses_signed_intervals():
    a = mk_constant(0xFFFFFFF0, 32)  # -16
    b = mk_constant(3, 32)
    assert infer_comp("<", a, b, signed=True) == mk_constant(1, 1)
    assert infer_comp("<", a, b, signed=False) == mk_constant(0, 1)


# -- conditional ----------------------------------------------------------------

def test_secret_condition_taints_result():
    out = infer_cond(filled(SDD, 1), mk_constant(1, 32), mk_constant(2, 32))
    assert out.display() == "{K}32:SDD"


def test_known_condition_selects_branch():
    v1, v2 = mk_constant(7, 32), mk_constant(9, 32)
    assert infer_cond(mk_constant(1, 1), v1, v2) == v1
    assert infer_cond(mk_constant(0, 1), v1, v2) == v2


def test_public_condition_joins_branches():
    out = infer_cond(filled(SID, 1), filled(URA), filled(SID))
    assert out.vector_type() is SID


# -- statements ------------------------------------------------------------------

REGS = {"eax": 0, "ebx": 0, "ecx": 0, "edx": 0, "esi": 0, "edi": 0,
        "ebp": 0xBF000010, "esp": 0xBF000000}


def test_load_copies_tracked_bytes():
    env = TypeEnv()
    annotate(env, ("mem", 0xBF000018, 4), SDD)
    stmt = Load("eax", MemRef(base="ebp", disp=8, size=4))
    exec_stmt(stmt, env, REGS, memo={})
    assert env.get("eax").display() == "{K}32:SDD"


def test_load_from_secret_address_marks_destination():
    env = TypeEnv()
    annotate(env, ("reg", "ecx"), SDD)
    stmt = Load("ebx", MemRef(base="ecx", disp=0x1000, size=4))
    exec_stmt(stmt, env, {**REGS, "ecx": 0x20}, memo={})
    assert env.get("ebx").vector_type() is SDD


def test_load_untracked_with_public_address_defaults_to_sid():
    env = TypeEnv()
    stmt = Load("ebx", MemRef(disp=0x1000, size=4))
    exec_stmt(stmt, env, REGS, memo={})
    assert env.get("ebx").display() == "{I}32:SID"


def test_store_then_load_roundtrips_types():
    env = TypeEnv()
    env.set("eax", mk_constant(0xDEADBEEF, 32))
    exec_stmt(Store(MemRef(base="esp", disp=-4 & 0xFFFFFFFF, size=4), Var("eax")),
              env, REGS, memo={})
    exec_stmt(Load("ebx", MemRef(base="esp", disp=-4 & 0xFFFFFFFF, size=4)),
              env, REGS, memo={})
    assert env.get("ebx").known_value() == 0xDEADBEEF


def test_seq_threads_left_to_right():
    env1 = TypeEnv()
    stmt = Seq(Assign("eax", VecConst(1, 32)),
               Assign("ebx", BinOp("+", Var("eax"), VecConst(2, 32))))
    exec_stmt(stmt, env1, REGS, memo={})
    env2 = TypeEnv()
    exec_stmt(Assign("eax", VecConst(1, 32)), env2, REGS, memo={})
    exec_stmt(Assign("ebx", BinOp("+", Var("eax"), VecConst(2, 32))), env2, REGS, memo={})
    assert env1.get("ebx") == env2.get("ebx") == mk_constant(3, 32)


def test_assign_keeps_predicates():
    env = TypeEnv()
    exec_stmt(Assign("eax", VecConst(0x42, 32)), env, REGS, memo={})
    assert env.get("eax").known_value() == 0x42


def test_eval_detects_same_operand_xor():
    env = TypeEnv()
    env.set("eax", mk_constant(0x1234, 32))
    out = eval_expr(BinOp("^", Var("eax"), Var("eax")), env)
    assert out.known_value() == 0


def test_width_mismatch_is_an_error():
    with pytest.raises(AnalysisError):
        infer_arith("+", filled(SID, 8), filled(SID, 16))
    with pytest.raises(AnalysisError):
        infer_logic_vec("&", filled(SID, 8), filled(SID, 16))


def test_format_rules_merges_constant_pairs():
    assert format_rules(["Logic.I", "Conj&Disj.I", "Const-Conj.I", "Const-Conj.II"]) \
        == "Logic.I, Conj&Disj.I, Const-Conj.I&II"
    assert format_rules(["Conj&Disj.I", "Conj&Disj.I"]) == "Conj&Disj.I"

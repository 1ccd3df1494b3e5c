"""bitline: trace-driven cache side-channel detection via bit-level security types.

The pipeline types every bit of the machine state on a logged micro-x86
execution trace with a five-level security lattice (constant, uniformly
random, weakly random, secret-independent, secret-dependent) plus optional
known-bit value predicates, then flags memory accesses whose cache-line
index bits are secret-dependent and conditional jumps whose condition is
secret-dependent with branch bodies in distinguishable cache lines.  A
brute-force oracle executes small programs over every secret/random
assignment to validate the verdicts.
"""

from .ir import (
    CST, URA, WRA, SID, SDD,
    RefinedBit, SecurityType, TypedBitvector, TypeEnv,
    annotate, join, mk_constant, vector_type,
)
from .layout import (
    BranchEntry, BranchTable, CacheGeometry,
    cache_line, distinguishable, lines_of_range, parse_branch_table,
)
from .frontend import (
    AnnotationSet, TaintState, TraceRecord,
    build_initial_env, lift, parse_annotations, parse_trace,
    resolve_address, serialize_trace, taint_pass,
)
from .detector import Finding, LeakageUnit, Report, analyze, check_sdma, check_sdbc, group_units
from .oracle import (
    GroundTruth, OracleProgram, check_uniform, compare, enumerate_leakage,
)

__version__ = "0.1.0"

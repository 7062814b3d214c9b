"""Desk-scale simulator for two compressible fluids sharing one velocity
field inside a domain bounded by a nonlinear elastic shell.

The solver alternates structure and fluid sub-problems over short time
windows, couples them through a penalized interface velocity exchange,
and checks a discrete energy ledger plus structural invariants at
runtime.  Modules:

    geometry          reference surfaces, flow map, cutoff profile
    shell_energy      elastic shell energy, derivatives, telescoping pairing
    pressure          two-component pressure laws, Helmholtz energy, audits
    fluid_solver      finite-volume transport/momentum on the enclosing box
    structure_solver  implicit shell sub-stepping with energy records
    coupling          window alternation, ledger, checkpoints
    diagnostics_io    energy ledger CSV, compactness gap, rate studies
    cli               command-line entry points
"""

__version__ = "0.1.0"

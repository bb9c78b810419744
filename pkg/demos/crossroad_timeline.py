"""Run one crossroad trial and print speed and light phase once per second."""

import sys

from apfdrive.config import load_config
from apfdrive.simulator import run_trial


def main(seed=0):
    cfg = load_config("crossroad")
    log, outcome = run_trial(cfg, seed, record_timing=False)
    print(" t[s]   v[m/s]  light  a[m/s2]")
    step = round(1.0 / cfg.T_s)
    for k in range(0, log.steps, step):
        phase = "red" if log.c_tl[k, 0] == 1.0 else "green"
        print(f"{log.t[k]:5.1f}  {log.states[k, 3]:7.2f}  {phase:>5}  {log.controls[k, 0]:7.2f}")
    print(f"outcome: {outcome.reason}, violations: {outcome.violations}")


if __name__ == "__main__":
    main(int(sys.argv[1]) if len(sys.argv) > 1 else 0)

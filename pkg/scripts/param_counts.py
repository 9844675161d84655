"""Parameter counts of the named configurations and the ablations."""

from mma import model as M


def main() -> None:
    for label, cfg in [("MMA-T", M.mma_t(2)), ("MMA-B", M.mma_b(2)), ("toy", M.toy(2))]:
        print(f"{label:6s} x2  {M.parameter_count(M.build(cfg)):>12,}")
    for name in ("wo_ca", "w_cnn"):
        print(f"MMA-T {name:6s} {M.parameter_count(M.build(M.ablation(M.mma_t(2), name))):>10,}")


if __name__ == "__main__":
    main()

"""Parameter counts and multiply-accumulate estimates for every preset."""

from polynext.model import PRESETS, build_model, flops_estimate, param_count, preset

REPORTED = {"cpolynext-t": 6.4e6, "cpolynext-s": 26e6, "apolynext-t": 6.5e6, "apolynext-s": 26e6,
            "cpolynext-lr": 5.5e6}


def main() -> None:
    print(f"{'preset':18s} {'params':>12s} {'reported':>10s} {'dev':>7s} {'GMAC':>7s}")
    for name in PRESETS:
        if name.endswith("-l") or name.endswith("-l-bn") or name.endswith("-b") or name.endswith("-b-bn"):
            continue  # large presets take long to build; pass them explicitly if needed
        m = build_model(preset(name), 0)
        n = param_count(m)
        ref = REPORTED.get(name)
        dev = f"{n / ref - 1:+.1%}" if ref else ""
        print(f"{name:18s} {n:12,d} {ref or 0:10.3g} {dev:>7s} {flops_estimate(m) / 1e9:7.2f}")


if __name__ == "__main__":
    main()

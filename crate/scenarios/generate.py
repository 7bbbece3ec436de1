"""Regenerates the grid, tariff and disturbance files under scenarios/."""
import json
import math
from pathlib import Path

HERE = Path(__file__).parent
R_KM, X_KM = 0.26, 0.36


def feeder(slack_voltage=1.0):
    trunk = 9.2 / 7
    buses = [{"id": 1, "type": "slack", "nominal_kv": 16.0}]
    buses += [{"id": i, "type": "pq", "nominal_kv": 16.0} for i in range(2, 11)]
    lines = [(i, i + 1, trunk) for i in range(1, 8)] + [(4, 9, 1.6), (6, 10, 2.1)]
    return {
        "buses": buses,
        "lines": [
            {"from": a, "to": b, "r_ohm": round(R_KM * km, 6), "x_ohm": round(X_KM * km, 6)}
            for a, b, km in lines
        ],
        "base_mva": 1.0,
        "measurement_buses": [1, 5, 8],
        "substation_bus": 1,
        "slack_voltage_pu": slack_voltage,
    }


def write_json(path, obj):
    path.write_text(json.dumps(obj, indent=2) + "\n")


def write_rows(path, rows):
    with path.open("w") as f:
        f.write("step,bus_id,p_kw,q_kvar\n")
        for step, bus, p, q in rows:
            f.write(f"{step},{bus},{p:.3f},{q:.3f}\n")


LOAD_BUSES = [2, 3, 4, 5, 6, 7, 9, 10]


def daily(steps, pv_peak):
    """Smooth daily load plus a half-sine PV curve at the inverter bus."""
    rows = []
    for k in range(steps):
        minute = k % 1440
        day = 0.5 - 0.5 * math.cos(2 * math.pi * (minute - 240) / 1440)
        for j, bus in enumerate(LOAD_BUSES):
            p = 18.0 + 14.0 * day + 2.0 * math.sin(k / 37.0 + j)
            rows.append((k, bus, -p, -0.08 * p))
        pv = pv_peak * math.sin(math.pi * (minute - 360) / 720) if 360 <= minute < 1080 else 0.0
        rows.append((k, 8, pv, 0.0))
    return rows


def plateaus(steps, levels, width):
    """Piecewise constant PV and load, one plateau every `width` steps."""
    rows = []
    for k in range(steps):
        pv, load = levels[(k // width) % len(levels)]
        for bus in LOAD_BUSES:
            rows.append((k, bus, -load, -0.1 * load))
        rows.append((k, 8, pv, 0.0))
    return rows


def main():
    write_json(HERE / "grids" / "feeder16kv.json", feeder())
    write_json(HERE / "grids" / "feeder16kv_high_slack.json", feeder(1.045))
    write_json(
        HERE / "tariffs" / "flat.json",
        {"s_n_kva": 800.0, "windows": [{"start_minute": 0, "end_minute": 0,
                                        "capacitive_slope": 0.01, "inductive_slope": -0.001}]},
    )
    write_json(
        HERE / "tariffs" / "noon_switch.json",
        {"s_n_kva": 800.0, "windows": [
            {"start_minute": 0, "end_minute": 720, "capacitive_slope": -0.002, "inductive_slope": 0.02},
            {"start_minute": 720, "end_minute": 0, "capacitive_slope": 0.01, "inductive_slope": -0.001},
        ]},
    )
    write_rows(HERE / "data" / "daily_780.csv", daily(780, 115.0))
    write_rows(HERE / "data" / "plateaus_500.csv",
               plateaus(500, [(600.0, 10.0), (450.0, 30.0), (700.0, 5.0), (300.0, 40.0), (550.0, 15.0)], 100))


if __name__ == "__main__":
    main()

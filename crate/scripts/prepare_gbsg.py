"""Build the GBSG internal/external CSV files from the R `survival` datasets.

Internal set: Rotterdam tumour bank, node-positive patients (n = 1546).
External set: German Breast Cancer Study Group trial (n = 686).

Both sets use recurrence-free survival in months. Tumour size is coded
0 (<= 20 mm), 1 (20-50 mm), 2 (> 50 mm).

Usage: python3 scripts/prepare_gbsg.py <rotterdam.pkl> <gbsg.pkl> <out_dir>
The pickles are the R datasets as pandas frames (e.g. from the `rdatasets`
package: rdatasets.data("survival", "rotterdam")).
"""

import sys

import pandas as pd

DAYS_PER_MONTH = 365.25 / 12.0
COLUMNS = ["time", "event", "x_hormone", "x_size", "x_menopause", "x_age",
           "x_nodes", "x_PGR", "x_ER"]


def size_group_mm(mm):
    if mm <= 20:
        return 0
    if mm <= 50:
        return 1
    return 2


def rotterdam(df):
    df = df[df.nodes > 0].copy()
    size = df["size"].map({"<=20": 0, "20-50": 1, ">50": 2})
    rfs = ((df.recur == 1) | (df.death == 1)).astype(int)
    rfstime = df.rtime.where(df.recur == 1, df.dtime)
    return pd.DataFrame({
        "time": (rfstime / DAYS_PER_MONTH).round(4),
        "event": rfs,
        "x_hormone": df.hormon,
        "x_size": size.astype(int),
        "x_menopause": df.meno,
        "x_age": df.age,
        "x_nodes": df.nodes,
        "x_PGR": df.pgr,
        "x_ER": df.er,
    })[COLUMNS]


def gbsg(df):
    return pd.DataFrame({
        "time": (df.rfstime / DAYS_PER_MONTH).round(4),
        "event": df.status,
        "x_hormone": df.hormon,
        "x_size": df["size"].map(size_group_mm),
        "x_menopause": df.meno,
        "x_age": df.age,
        "x_nodes": df.nodes,
        "x_PGR": df.pgr,
        "x_ER": df.er,
    })[COLUMNS]


def main():
    rot = pd.read_pickle(sys.argv[1])
    ger = pd.read_pickle(sys.argv[2])
    out = sys.argv[3]
    rotterdam(rot).to_csv(f"{out}/internal.csv", index=False)
    gbsg(ger).to_csv(f"{out}/external.csv", index=False)


if __name__ == "__main__":
    main()

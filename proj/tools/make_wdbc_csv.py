#!/usr/bin/env python3
# Copyright 2026 The M-DEW Authors.
# Licensed under the Apache License, Version 2.0 (the "License");
# you may not use this file except in compliance with the License.
# You may obtain a copy of the License at
#
#     https://www.apache.org/licenses/LICENSE-2.0
#
# Unless required by applicable law or agreed to in writing, software
# distributed under the License is distributed on an "AS IS" BASIS,
# WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
# See the License for the specific language governing permissions and
# limitations under the License.

"""Writes the Wisconsin Diagnostic Breast Cancer data as a CSV.

Uses the copy bundled with scikit-learn (no network access). The target
column is 1 for malignant and 0 for benign (569 rows, 212 malignant).
"""

import argparse
import csv
import hashlib
import sys


def main() -> int:
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("out", help="output CSV path")
    args = parser.parse_args()
    try:
        from sklearn.datasets import load_breast_cancer
    except ImportError:
        print("scikit-learn is required to build the WDBC CSV", file=sys.stderr)
        return 1

    bunch = load_breast_cancer()
    header = [name.replace(" ", "_") for name in bunch.feature_names] + ["target"]
    with open(args.out, "w", newline="") as handle:
        writer = csv.writer(handle, lineterminator="\n")
        writer.writerow(header)
        for row, label in zip(bunch.data, bunch.target):
            # scikit-learn codes malignant as 0.
            writer.writerow([repr(float(v)) for v in row] + [1 - int(label)])

    with open(args.out, "rb") as handle:
        digest = hashlib.sha256(handle.read()).hexdigest()
    positives = int((bunch.target == 0).sum())
    print(f"wrote {args.out}: {len(bunch.data)} rows, {positives} positive, sha256 {digest}")
    return 0


if __name__ == "__main__":
    sys.exit(main())

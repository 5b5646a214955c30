"""Validates config files and run outputs against the JSON schemas.

usage: validate_schemas.py SCHEMA_DIR --configs FILE... --reports FILE...
"""
import argparse
import json
import sys
from pathlib import Path

import jsonschema


def check(schema, files, label):
    validator = jsonschema.Draft202012Validator(schema)
    bad = 0
    for f in files:
        doc = json.loads(Path(f).read_text())
        errors = sorted(validator.iter_errors(doc), key=lambda e: list(e.path))
        for e in errors:
            print(f"{f}: /{'/'.join(map(str, e.path))}: {e.message}")
        bad += bool(errors)
        print(f"{label} {f}: {'invalid' if errors else 'ok'}")
    return bad


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("schema_dir", type=Path)
    ap.add_argument("--configs", nargs="*", default=[])
    ap.add_argument("--reports", nargs="*", default=[])
    args = ap.parse_args()
    config_schema = json.loads((args.schema_dir / "config.schema.json").read_text())
    report_schema = json.loads((args.schema_dir / "report.schema.json").read_text())
    jsonschema.Draft202012Validator.check_schema(config_schema)
    jsonschema.Draft202012Validator.check_schema(report_schema)
    bad = check(config_schema, args.configs, "config")
    bad += check(report_schema, args.reports, "report")
    # The config echoed inside a report must itself be a valid config.
    for f in args.reports:
        echoed = json.loads(Path(f).read_text())["config"]
        errors = list(jsonschema.Draft202012Validator(config_schema).iter_errors(echoed))
        for e in errors:
            print(f"{f}: /config/{'/'.join(map(str, e.path))}: {e.message}")
        bad += bool(errors)
    return 1 if bad else 0


if __name__ == "__main__":
    sys.exit(main())

from __future__ import annotations
from pathlib import Path
import json
from neuraldress.engine.dataset import DatasetRecord
from neuraldress.engine.settings import FitSchedule, ProjectConfig, SyntheticWorld

def export_schemas(out_dir: Path) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    schemas = {
        "ProjectConfig.schema.json": ProjectConfig.model_json_schema(),
        "FitSchedule.schema.json": FitSchedule.model_json_schema(),
        "SyntheticWorld.schema.json": SyntheticWorld.model_json_schema(),
        "DatasetRecord.schema.json": DatasetRecord.model_json_schema(),
    }
    for name, schema in schemas.items():
        (out_dir / name).write_text(json.dumps(schema, indent=2, sort_keys=True), encoding="utf-8")

if __name__ == "__main__":
    root = Path(__file__).resolve().parents[3] / "docs" / "schemas"
    export_schemas(root)
    print(f"Exported schemas to {root}")

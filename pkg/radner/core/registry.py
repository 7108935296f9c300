import json
import pathlib
from typing import Any, Dict, List

from radner.exceptions import EconomyConfigError

CATALOG_PATH = pathlib.Path(__file__).resolve().parent.parent / "catalog"

class EconomyRegistry:
    """Bundled benchmark economies, keyed by their ``name`` field."""

    def __init__(self, path: pathlib.Path = CATALOG_PATH):
        self.path = path
        self.economies: Dict[str, Dict[str, Any]] = {}
        self.economy_desc: Dict[str, str] = {}

    def load(self) -> "EconomyRegistry":
        for f in sorted(self.path.glob("*.json")):
            data = json.loads(f.read_text(encoding="utf-8"))
            name = data.get('name', f.stem)

            self.economies[name] = data
            self.economy_desc[name] = data.get('description', 'No description')
        return self

    def names(self) -> List[str]:
        return sorted(self.economies)

    def get(self, name: str) -> Dict[str, Any]:
        if name not in self.economies:
            raise EconomyConfigError(
                f"unknown catalog economy '{name}' (available: {', '.join(self.names())})",
                errors=[{"loc": "economy", "msg": "not in catalog", "input": name}],
            )
        return self.economies[name]

def resolve_economy_document(ref: str, base: pathlib.Path = pathlib.Path(".")) -> Dict[str, Any]:
    """A RunConfig ``economy`` entry is a JSON path (relative to the config file) or a catalog name."""
    candidate = pathlib.Path(ref)
    if not candidate.is_absolute():
        candidate = base / candidate
    if candidate.suffix == ".json" or candidate.exists():
        if not candidate.exists():
            raise EconomyConfigError(f"economy file not found: {candidate}",
                                     errors=[{"loc": "economy", "msg": "missing file", "input": ref}])
        return json.loads(candidate.read_text(encoding="utf-8"))
    return EconomyRegistry().load().get(ref)

"""JSON schemas for the machine-readable CLI outputs."""

_INT = {"type": "integer", "minimum": 0}
_PROB = {"type": "number", "minimum": 0, "maximum": 1}

METRICS = {
    "type": "object",
    "required": ["accuracy", "precision", "recall", "f_score", "auc", "threshold", "n", "confusion"],
    "properties": {
        "accuracy": _PROB,
        "precision": _PROB,
        "recall": _PROB,
        "f_score": _PROB,
        "auc": _PROB,
        "n": _INT,
        "confusion": {
            "type": "object",
            "required": ["tp", "tn", "fp", "fn"],
            "properties": {k: _INT for k in ("tp", "tn", "fp", "fn")},
            "additionalProperties": False,
        },
    },
}

FLOW = {
    "type": "object",
    "required": ["src", "dst", "protocol", "flow_start_us", "packets", "probability", "label"],
    "properties": {
        "src": {"type": "string", "pattern": r"^\d+\.\d+\.\d+\.\d+:\d+$"},
        "dst": {"type": "string", "pattern": r"^\d+\.\d+\.\d+\.\d+:\d+$"},
        "protocol": {"enum": [6, 17]},
        "flow_start_us": _INT,
        "packets": {"type": "integer", "minimum": 1},
        "probability": _PROB,
        "label": {"enum": [0, 1]},
    },
    "additionalProperties": False,
}

WINDOW_REPORT = {
    "type": "object",
    "required": [
        "window_index", "start_us", "end_us", "packets_seen", "packets_dropped_at_ingress",
        "non_flow_packets", "flows_emitted", "malicious_flows", "ips_blocked", "source_exhausted",
    ],
    "properties": {
        "window_index": {"type": "integer", "minimum": 1},
        "start_us": _INT,
        "end_us": _INT,
        "packets_seen": _INT,
        "packets_dropped_at_ingress": _INT,
        "non_flow_packets": _INT,
        "flows_emitted": _INT,
        "malicious_flows": _INT,
        "ips_blocked": {"type": "array", "items": {"type": "string"}},
        "source_exhausted": {"type": "boolean"},
        "flows": {"type": "array", "items": FLOW},
        "timings": {"type": "object", "additionalProperties": {"type": "number", "minimum": 0}},
    },
    "additionalProperties": False,
}

FILTER_STATUS = {
    "type": "object",
    "required": ["hook_mode", "total_passed", "total_dropped", "entries"],
    "properties": {
        "hook_mode": {"enum": ["generic", "native", "offload"]},
        "total_passed": _INT,
        "total_dropped": _INT,
        "capacity": _INT,
        "entries": {
            "type": "array",
            "items": {
                "type": "object",
                "required": ["address", "mode", "active", "packets_dropped", "bytes_dropped", "blocked_at_us", "unblocked_at_us"],
                "properties": {
                    "address": {"type": "string"},
                    "mode": {"const": "src"},
                    "active": {"type": "boolean"},
                    "packets_dropped": _INT,
                    "bytes_dropped": _INT,
                    "blocked_at_us": {"type": "integer"},
                    "unblocked_at_us": {"type": ["integer", "null"]},
                },
            },
        },
    },
}

BENCH = {
    "type": "object",
    "additionalProperties": {
        "type": "array",
        "items": {
            "type": "object",
            "required": ["mode", "n_packets", "blocked_fraction", "seconds", "measured_pps", "adjusted_pps"],
            "properties": {
                "mode": {"enum": ["generic", "native", "offload"]},
                "measured_pps": {"type": "number", "exclusiveMinimum": 0},
                "adjusted_pps": {"type": "number", "exclusiveMinimum": 0},
            },
        },
    },
}

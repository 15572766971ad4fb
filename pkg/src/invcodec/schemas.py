"""JSON schemas for the CLI's machine-readable reports.

Infinite PSNR / MS-SSIM dB values are written as the string ``"inf"``.
"""

_NUMBER_OR_INF = {"anyOf": [{"type": "number"}, {"const": "inf"}]}

INSPECT = {
    "type": "object",
    "required": ["version", "model_hash", "height", "width", "alpha", "latent_channels",
                 "context", "z_payload_bytes", "y_payload_bytes", "total_bytes"],
    "properties": {
        "version": {"type": "integer"},
        "model_hash": {"type": "string", "pattern": "^[0-9a-f]{16}$"},
        "height": {"type": "integer", "minimum": 1},
        "width": {"type": "integer", "minimum": 1},
        "alpha": {"type": "integer", "minimum": 1},
        "latent_channels": {"type": "integer", "minimum": 1},
        "context": {"type": "boolean"},
        "z_payload_bytes": {"type": "integer", "minimum": 0},
        "y_payload_bytes": {"type": "integer", "minimum": 0},
        "total_bytes": {"type": "integer", "minimum": 1},
    },
}

METRICS = {
    "type": "object",
    "required": ["psnr_db", "msssim", "msssim_db"],
    "properties": {
        "psnr_db": _NUMBER_OR_INF,
        "msssim": {"type": "number", "minimum": -1, "maximum": 1},
        "msssim_db": _NUMBER_OR_INF,
    },
}

DEVIATION = {
    "type": "object",
    "required": ["alpha", "epsilon", "mu", "scaled_epsilon", "map_shape"],
    "properties": {
        "alpha": {"type": "integer", "minimum": 1},
        "epsilon": {"type": "number", "minimum": 0},
        "mu": {"type": "number", "minimum": 0},
        "scaled_epsilon": {"type": ["number", "null"], "minimum": 0},
        "map_shape": {"type": "array", "items": {"type": "integer"}, "minItems": 2, "maxItems": 2},
    },
}

RD = {
    "type": "object",
    "required": ["points", "auc"],
    "properties": {
        "points": {
            "type": "array",
            "items": {
                "type": "object",
                "required": ["bpp", "psnr_db", "msssim", "label"],
                "properties": {
                    "bpp": {"type": "number", "exclusiveMinimum": 0},
                    "psnr_db": _NUMBER_OR_INF,
                    "msssim": {"type": "number"},
                    "label": {"type": "string"},
                },
            },
        },
        "auc": {"type": ["number", "null"]},
    },
}

ENCODE = {
    "type": "object",
    "required": ["bpp", "total_bpp", "bytes", "height", "width", "seconds"],
    "properties": {
        "bpp": {"type": "number", "minimum": 0},
        "total_bpp": {"type": "number", "minimum": 0},
        "bytes": {"type": "integer", "minimum": 1},
        "height": {"type": "integer", "minimum": 1},
        "width": {"type": "integer", "minimum": 1},
        "seconds": {"type": "number", "minimum": 0},
    },
}

ESTIMATE = {
    "type": "object",
    "required": ["estimated_bpp", "actual_bpp", "payload_bpp", "total_bytes", "pixels"],
    "properties": {
        "estimated_bpp": {"type": "number", "minimum": 0},
        "actual_bpp": {"type": "number", "minimum": 0},
        "payload_bpp": {"type": "number", "minimum": 0},
        "total_bytes": {"type": "integer"},
        "pixels": {"type": "integer"},
    },
}

"""Reference external scorer for the evocomp mask-search pipeline.

Speaks newline-delimited JSON on stdin/stdout:

    -> {"type": "init", "dataset": "<path>"}     <- {"type": "ready"}
    -> {"type": "score", "id": N, "sample": "<id>", "mask": [0|1, ...]}
                                                 <- {"type": "loss", "id": N, "loss": X}
    -> {"type": "shutdown"}                      (clean exit 0)
    errors:                                      <- {"type": "error", "id": N, "message": "..."}

Deliberately dependency-free: the dataset container parser and the pooled
loss are independent re-implementations used for cross-checking the main
package.
"""

__version__ = "0.1.0"

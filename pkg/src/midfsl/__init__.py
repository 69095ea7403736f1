"""midfsl: mid-level feature few-shot recognition.

Base-class training with a residual-prediction auxiliary task, dual
novel-class feature construction (weighted mid-feature concatenation for
distant domains, prototype reconstruction plus predicted residual for
in/near domains), episodic evaluation, and Proxy-A-Distance measurement.
"""

__version__ = "0.1.0"

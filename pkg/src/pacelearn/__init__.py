"""Learning a pacemaker controller from labelled closed-loop traces.

Modules, in pipeline order: ``trace_model``, ``heart_model``, ``ref_pacemaker``,
``dataset_gen``, ``nn_core``, ``seq_classifiers``, ``rm_trainer``, ``rl_agent``,
``ddc_verifier``, ``dfa_extract`` and the ``cli`` entry point.
"""

__version__ = "0.1.0"

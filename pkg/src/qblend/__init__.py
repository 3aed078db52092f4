"""qblend: offline-RL critic training plus dynamic action rescoring.

The package splits into the experience memory and its file format
(:mod:`qblend.experience`), a small hand-differentiated neural stack
(:mod:`qblend.neuralnet`), the expectile-regression critic and its tabular
oracle (:mod:`qblend.critic`), policy backends (:mod:`qblend.policy`),
action grounding (:mod:`qblend.grounding`), the rescoring agent loop
(:mod:`qblend.agent`), the TextLab toy environment (:mod:`qblend.textlab`),
and the CLI (:mod:`qblend.cli`).
"""

__version__ = "0.1.0"

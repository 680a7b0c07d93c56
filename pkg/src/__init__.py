# ibakit メインパッケージ
"""
情報ボトルネックによるトークン寄与度推定ツールキット

小規模 Transformer 分類器の任意の層にボトルネックを挿入してトークンの寄与度を推定し、
比較手法（Integrated Gradients, LIME-lite, ランダム）と劣化テストで評価します。
"""

__version__ = "1.0.0"
__description__ = "Information bottleneck attribution toolkit"

"""clusterfl: 按模型指纹聚类的联邦学习 IoT 网络异常检测。"""

__version__ = "1.0.0"

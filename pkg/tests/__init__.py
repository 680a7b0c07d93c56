# ibakit テストパッケージ
